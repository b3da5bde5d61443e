import math

import numpy as np
import numpy.testing as npt
import pytest
import torch

from mmchange.core import np_rng
from mmchange.data import generate_dataset, load_dataset
from mmchange.training import (
    AdamState,
    GRADCHECK_MODULES,
    TrainConfig,
    TrainingError,
    adam_step,
    evaluate,
    gradcheck,
    parse_config_file,
    poly_lr,
    train,
)
from mmchange.model import load_checkpoint

TINY_CFG = dict(widths=(8, 8, 8, 8), text_dim=16, hash_buckets=64, eval_interval=0)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "train"
    generate_dataset(3, 8, 64, root)
    return load_dataset(root)


class TestPolyLr:
    def test_initial_rate_is_the_configured_base(self):
        cfg = TrainConfig(lr0=0.0005, max_iteration=40000, power=0.9)
        assert poly_lr(0, cfg) == 0.0005

    def test_final_rate_is_zero(self):
        cfg = TrainConfig(lr0=0.0005, max_iteration=40000, power=0.9)
        assert poly_lr(40000, cfg) == 0.0

    def test_midpoint_value(self):
        cfg = TrainConfig(lr0=0.0005, max_iteration=40000, power=0.9)
        npt.assert_allclose(poly_lr(20000, cfg), 2.6795e-4, atol=1e-8)
        npt.assert_allclose(poly_lr(20000, cfg), 0.0005 * 0.5**0.9, rtol=1e-12)

    def test_monotone_non_increasing(self):
        cfg = TrainConfig(lr0=0.0005, max_iteration=40000, power=0.9)
        steps = np.linspace(0, 40000, 1000, dtype=int)
        rates = [poly_lr(int(s), cfg) for s in steps]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_clamps_beyond_max(self):
        cfg = TrainConfig(max_iteration=100)
        assert poly_lr(250, cfg) == 0.0

    def test_rejects_negative_step(self):
        with pytest.raises(ValueError):
            poly_lr(-1, TrainConfig())


def numpy_adam_oracle(p0, grads, lr, beta1, beta2, eps, wd, steps):
    """Independent decoupled-Adam reference used to pin adam_step."""
    p = float(p0)
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grads[t - 1]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p *= 1 - lr * wd
        p -= lr * mhat / (math.sqrt(vhat) + eps)
    return p


class TestAdamStep:
    def one_param(self, value=1.0):
        p = torch.tensor([value], dtype=torch.float64)
        return {"w": p}, AdamState.zeros({"w": p})

    def test_zero_grads_zero_decay_leave_params_alone(self):
        params, state = self.one_param(2.5)
        cfg = TrainConfig(weight_decay=0.0)
        adam_step(params, {"w": torch.zeros(1, dtype=torch.float64)}, state, 0.1, cfg)
        npt.assert_allclose(params["w"].numpy(), [2.5])

    def test_single_step_moves_by_minus_lr(self):
        params, state = self.one_param(0.0)
        cfg = TrainConfig(weight_decay=0.0)
        adam_step(params, {"w": torch.ones(1, dtype=torch.float64)}, state, 0.1, cfg)
        npt.assert_allclose(params["w"].numpy(), [-0.1], atol=1e-8)

    def test_pure_decay_shrinks_toward_zero(self):
        params, state = self.one_param(1.0)
        cfg = TrainConfig(weight_decay=0.01, decoupled_weight_decay=True)
        for _ in range(3):
            adam_step(params, {"w": torch.zeros(1, dtype=torch.float64)}, state, 0.5, cfg)
        npt.assert_allclose(params["w"].numpy(), [(1 - 0.5 * 0.01) ** 3], rtol=1e-12)

    def test_matches_numpy_oracle_over_steps(self):
        rng = np_rng("adam-oracle")
        grads = rng.normal(size=5)
        params, state = self.one_param(0.7)
        cfg = TrainConfig(weight_decay=0.001)
        for g in grads:
            adam_step(params, {"w": torch.tensor([g], dtype=torch.float64)}, state, 0.05, cfg)
        expected = numpy_adam_oracle(0.7, grads, 0.05, cfg.beta1, cfg.beta2,
                                     cfg.adam_epsilon, cfg.weight_decay, 5)
        npt.assert_allclose(params["w"].numpy(), [expected], rtol=1e-12)

    def test_coupled_decay_enters_the_gradient(self):
        params, state = self.one_param(1.0)
        cfg = TrainConfig(weight_decay=0.01, decoupled_weight_decay=False)
        adam_step(params, {"w": torch.zeros(1, dtype=torch.float64)}, state, 0.1, cfg)
        # wd*p acts as the gradient, so the step is a full Adam move, not a scaling
        npt.assert_allclose(params["w"].numpy(), [1.0 - 0.1 * 0.01 / (0.01 + 1e-8)], rtol=1e-6)

    def test_non_finite_grad_aborts_with_parameter_name(self):
        params, state = self.one_param()
        cfg = TrainConfig()
        with pytest.raises(TrainingError, match="'w'"):
            adam_step(params, {"w": torch.tensor([float("nan")])}, state, 0.1, cfg)

    def test_missing_grad_treated_as_zero(self):
        params, state = self.one_param(1.5)
        cfg = TrainConfig(weight_decay=0.0)
        adam_step(params, {}, state, 0.1, cfg)
        npt.assert_allclose(params["w"].numpy(), [1.5])


class TestConfigParsing:
    def test_parse_key_value_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(
            "# schedule\nlr0 = 0.001\nmax_iteration = 40\nuse_tde = false\n"
            "widths = 8,8,8,8\n\nseed = 3  # trailing comment\n"
        )
        cfg = TrainConfig.from_mapping(parse_config_file(path))
        assert cfg.lr0 == 0.001 and cfg.max_iteration == 40
        assert cfg.use_tde is False and cfg.widths == (8, 8, 8, 8) and cfg.seed == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            TrainConfig.from_mapping({"learning_rate": "0.1"})

    def test_bad_boolean_rejected(self):
        with pytest.raises(ValueError, match="boolean"):
            TrainConfig.from_mapping({"use_ifr": "maybe"})

    def test_malformed_line_reports_location(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("lr0 0.001\n")
        with pytest.raises(ValueError, match="bad.cfg:1"):
            parse_config_file(path)

    def test_validation_errors(self):
        with pytest.raises(ValueError, match="lr0"):
            TrainConfig(lr0=0.0).validate()
        with pytest.raises(ValueError, match="betas"):
            TrainConfig(beta1=1.0).validate()
        with pytest.raises(ValueError, match="power"):
            TrainConfig(power=0.0).validate()


class TestTrainLoop:
    def test_same_seed_runs_are_identical(self, small_dataset):
        cfg = TrainConfig(max_iteration=6, seed=4, **TINY_CFG)
        run1 = train(cfg, small_dataset)
        run2 = train(cfg, small_dataset)
        npt.assert_array_equal(np.array(run1["losses"]), np.array(run2["losses"]))

    def test_initial_loss_is_near_uniform(self, small_dataset):
        cfg = TrainConfig(max_iteration=1, seed=0, **TINY_CFG)
        run = train(cfg, small_dataset)
        assert abs(run["losses"][0] - math.log(2)) <= 0.15

    def test_log_format(self, small_dataset, tmp_path):
        cfg = TrainConfig(max_iteration=4, seed=1, **dict(TINY_CFG, eval_interval=2))
        train(cfg, small_dataset, out_dir=tmp_path / "run")
        lines = (tmp_path / "run" / "train.log").read_text().splitlines()
        step_lines = [l for l in lines if not l.startswith("EVAL")]
        eval_lines = [l for l in lines if l.startswith("EVAL")]
        assert len(step_lines) == 4 and len(eval_lines) == 2
        step, lr, loss = step_lines[0].split("\t")
        assert step == "0" and float(lr) == poly_lr(0, cfg) and float(loss) > 0
        assert len(eval_lines[0].split("\t")) == 6

    def test_resume_continues_the_step_counter(self, small_dataset, tmp_path):
        cfg10 = TrainConfig(max_iteration=10, seed=2, **dict(TINY_CFG, eval_interval=5))
        first = train(cfg10, small_dataset, out_dir=tmp_path / "first")

        cfg16 = TrainConfig(max_iteration=16, seed=2, **dict(TINY_CFG, eval_interval=5))
        resumed = train(cfg16, small_dataset, out_dir=tmp_path / "resumed",
                        resume=first["checkpoint"])
        steps = [int(l.split("\t")[0]) for l in resumed["log_lines"] if not l.startswith("EVAL")]
        assert steps == list(range(10, 16))
        _, final_step, _ = load_checkpoint(resumed["checkpoint"])
        assert final_step == 16
        again = train(cfg16, small_dataset, resume=first["checkpoint"])
        npt.assert_array_equal(np.array(resumed["losses"]), np.array(again["losses"]))

    def test_checkpoint_reload_reproduces_eval(self, small_dataset, tmp_path):
        cfg = TrainConfig(max_iteration=5, seed=3, **TINY_CFG)
        run = train(cfg, small_dataset, out_dir=tmp_path / "run")
        metrics_live, _ = evaluate(run["model"], small_dataset)
        loaded, step, _ = load_checkpoint(run["checkpoint"])
        assert step == 5
        metrics_loaded, _ = evaluate(loaded, small_dataset)
        for key in metrics_live:
            assert abs(metrics_live[key] - metrics_loaded[key]) <= 1e-6

    def test_empty_dataset_rejected(self):
        with pytest.raises(TrainingError, match="empty"):
            train(TrainConfig(), [])


class TestEvaluate:
    def test_perturbed_evaluation_is_deterministic(self, small_dataset):
        cfg = TrainConfig(max_iteration=2, seed=0, **TINY_CFG)
        model = train(cfg, small_dataset)["model"]
        m1, _ = evaluate(model, small_dataset, noise_sigma=0.05, brightness_delta=0.2,
                         contrast_factor=1.2, seed=9)
        m2, _ = evaluate(model, small_dataset, noise_sigma=0.05, brightness_delta=0.2,
                         contrast_factor=1.2, seed=9)
        assert m1 == m2


class TestGradcheckHarness:
    def test_unknown_module_rejected(self):
        with pytest.raises(ValueError, match="unknown gradcheck module"):
            gradcheck("transformer")

    def test_module_list_is_stable(self):
        assert "tde" in GRADCHECK_MODULES and "model" in GRADCHECK_MODULES

    def test_core_report_aggregates_primitives(self):
        report = gradcheck("core", dims=(3, 3, 3))
        assert report.max_rel_err < 1e-4
        assert report.checked > 100
