"""Training recipe: Adam with polynomial LR decay, plus verification harness.

The optimizer is a from-scratch Adam step with bias correction and (by
default) decoupled weight decay, driven by a polynomial schedule
lr0 * (1 - step/max_iteration)^power. Everything is seeded: parameter init,
batch order and per-sample augmentation streams derive from the config seed,
so two runs with the same config produce identical loss curves.

The gradcheck harness is the independent oracle for every differentiable
block: central finite differences in double precision against autograd.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from . import core
from .data import BiTemporalSample, augment, perturb
from .encoders import ResidualBlock
from .ifr import IfrBlock
from .itff import ItffBlock
from .metrics import ConfusionCounts, all_metrics, confusion
from .model import (
    ChangeDetector,
    FusionFallback,
    ModelConfig,
    build_model,
    load_checkpoint,
    predict_mask,
    save_checkpoint,
)
from .tde import TdeBlock


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # optimizer / schedule (full-scale reference values: batch 32, 40000 iters)
    lr0: float = 0.0005
    batch_size: int = 8
    max_iteration: int = 500
    power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0001
    adam_epsilon: float = 1e-8
    decoupled_weight_decay: bool = True
    seed: int = 0
    eval_interval: int = 100
    crop_fraction: float = 0.75  # 1.0 disables the crop augmentation
    # model
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    text_dim: int = 64
    hash_buckets: int = 4096
    reduction: int = 4
    spatial_kernel: int = 7
    ifr_softmax_axis: str = "channel"
    use_ifr: bool = True
    use_tde: bool = True
    use_itff: bool = True
    use_text: bool = True

    def validate(self) -> "TrainConfig":
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.max_iteration <= 0:
            raise ValueError("max_iteration must be positive")
        if self.power <= 0:
            raise ValueError("power must be positive")
        for b in (self.beta1, self.beta2):
            if not 0 < b < 1:
                raise ValueError("betas must lie in (0, 1)")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")
        self.model_config()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            widths=self.widths,
            text_dim=self.text_dim,
            hash_buckets=self.hash_buckets,
            reduction=self.reduction,
            spatial_kernel=self.spatial_kernel,
            ifr_softmax_axis=self.ifr_softmax_axis,
            use_ifr=self.use_ifr,
            use_tde=self.use_tde,
            use_itff=self.use_itff,
            use_text=self.use_text,
            seed=self.seed,
        ).validate()

    @classmethod
    def from_mapping(cls, mapping: dict, **overrides) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, known[key].type, key)
        kwargs.update(overrides)
        return cls(**kwargs).validate()


def _coerce(raw, annotation, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if "bool" in str(annotation):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if "tuple" in str(annotation):
        return tuple(int(p) for p in text.replace(",", " ").split())
    if "int" in str(annotation):
        return int(text)
    if "float" in str(annotation):
        return float(text)
    return text


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` text file; '#' starts a comment."""
    mapping: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping


def poly_lr(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= cfg.max_iteration:
        return 0.0
    return cfg.lr0 * (1.0 - step / cfg.max_iteration) ** cfg.power


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )

    def to_payload(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    @classmethod
    def from_payload(cls, payload: dict) -> "AdamState":
        return cls(m=payload["m"], v=payload["v"], t=payload["t"])


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One Adam update in place; aborts on non-finite gradients."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.t}")
            if cfg.weight_decay and not cfg.decoupled_weight_decay:
                g = g + cfg.weight_decay * p
            m, v = state.m[name], state.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            if cfg.weight_decay and cfg.decoupled_weight_decay:
                p.mul_(1.0 - lr * cfg.weight_decay)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(cfg.adam_epsilon), value=-lr)


def batch_tensors(samples: list[BiTemporalSample]):
    img_a = torch.from_numpy(np.stack([s.image_a for s in samples]))
    img_b = torch.from_numpy(np.stack([s.image_b for s in samples]))
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
    return img_a, img_b, masks, [s.caption_a for s in samples], [s.caption_b for s in samples]


def evaluate(
    model: ChangeDetector,
    samples: list[BiTemporalSample],
    batch_size: int = 8,
    noise_sigma: float = 0.0,
    brightness_delta: float = 0.0,
    contrast_factor: float = 1.0,
    seed: int = 0,
):
    """Micro-averaged metrics over a sample list, optionally perturbed."""
    was_training = model.training
    model.eval()
    counts = ConfusionCounts()
    perturbed = (noise_sigma, brightness_delta, contrast_factor) != (0.0, 0.0, 1.0)
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            if perturbed:
                chunk = [
                    perturb(s, noise_sigma, brightness_delta, contrast_factor,
                            rng=core.np_rng(seed, "perturb", s.id, i))
                    for i, s in enumerate(chunk, start=lo)
                ]
            img_a, img_b, masks, caps_a, caps_b = batch_tensors(chunk)
            logits = model(img_a, img_b, caps_a, caps_b)
            pred = predict_mask(logits)
            counts = counts + confusion(pred, masks.numpy())
    if was_training:
        model.train()
    return all_metrics(counts), counts


def train(
    cfg: TrainConfig,
    train_samples: list[BiTemporalSample],
    eval_samples: list[BiTemporalSample] | None = None,
    out_dir=None,
    resume=None,
    resume_force=False,
    log_fn=None,
) -> dict:
    """Run the optimization loop; returns a summary with the trained model.

    Writes train.log and checkpoint.bin under out_dir when given. The eval
    set defaults to the training set.
    """
    cfg.validate()
    if not train_samples:
        raise TrainingError("empty training set")
    eval_samples = eval_samples if eval_samples is not None else train_samples

    if resume is not None:
        model, start_step, opt_payload = load_checkpoint(
            resume, expected_config=cfg.model_config(), force=resume_force
        )
        model = model.train()
        params = dict(model.named_parameters())
        adam = AdamState.from_payload(opt_payload) if opt_payload else AdamState.zeros(params)
    else:
        model = build_model(cfg.model_config())
        start_step = 0
        params = dict(model.named_parameters())
        adam = AdamState.zeros(params)

    h = train_samples[0].mask.shape[0]
    crop = int(round(h * cfg.crop_fraction)) if cfg.crop_fraction < 1.0 else None

    log_lines: list[str] = []

    def log(line: str):
        log_lines.append(line)
        if log_fn:
            log_fn(line)

    losses: list[float] = []
    evals: list[dict] = []
    ckpt_path = os.path.join(out_dir, "checkpoint.bin") if out_dir is not None else None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    model.train()
    n = len(train_samples)
    for step in range(start_step, cfg.max_iteration):
        lr = poly_lr(step, cfg)
        idx = core.np_rng(cfg.seed, "batch", step).integers(0, n, size=cfg.batch_size)
        batch = [
            augment(train_samples[i], core.np_rng(cfg.seed, "aug", step, k), crop)
            for k, i in enumerate(idx)
        ]
        img_a, img_b, masks, caps_a, caps_b = batch_tensors(batch)
        logits = model(img_a, img_b, caps_a, caps_b)
        loss = F.cross_entropy(logits, masks)
        model.zero_grad(set_to_none=True)
        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        adam_step(params, grads, adam, lr, cfg)

        loss_val = float(loss.detach())
        losses.append(loss_val)
        log(f"{step}\t{lr:.10g}\t{loss_val:.10g}")

        if cfg.eval_interval and (step + 1) % cfg.eval_interval == 0:
            metrics, _ = evaluate(model, eval_samples, batch_size=cfg.batch_size)
            evals.append({"step": step, **metrics})
            log(
                f"EVAL\t{step}\t{metrics['iou']:.6f}\t{metrics['f1']:.6f}"
                f"\t{metrics['precision']:.6f}\t{metrics['recall']:.6f}"
            )
            if ckpt_path:
                save_checkpoint(ckpt_path, model, step=step + 1, optimizer_state=adam.to_payload())

    model.eval()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, step=cfg.max_iteration, optimizer_state=adam.to_payload())
    if out_dir is not None:
        with open(os.path.join(out_dir, "train.log"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))

    return {
        "model": model,
        "losses": losses,
        "evals": evals,
        "checkpoint": ckpt_path,
        "log_lines": log_lines,
    }


# ---------------------------------------------------------------------------
# gradient verification harness


@dataclass
class GradCheckReport:
    module: str
    max_rel_err: float
    worst_coord: str
    checked: int


GRADCHECK_MODULES = (
    "softmax", "sdpa", "batch_norm", "upsample", "global_avg_pool",
    "core", "encoder", "tde", "ifr", "itff", "fallback", "model",
)


def gradcheck(
    module: str,
    dims: tuple[int, int, int] = (4, 4, 4),
    epsilon: float = 1e-5,
    seed: int = 0,
    max_coords: int | None = None,
) -> GradCheckReport:
    """Compare autograd gradients against central finite differences.

    Runs in double precision with modules in eval mode (running-stat batch
    norm), checking every input and parameter coordinate unless max_coords
    caps the count. The relative error denominator is floored at 1e-3 so
    coordinates with vanishing true gradient measure finite-difference noise
    on an absolute scale instead of blowing up.
    """
    if module == "core":
        sub = [gradcheck(m, dims, epsilon, seed) for m in
               ("softmax", "sdpa", "batch_norm", "upsample", "global_avg_pool")]
        worst = max(sub, key=lambda r: r.max_rel_err)
        return GradCheckReport("core", worst.max_rel_err, f"{worst.module}:{worst.worst_coord}",
                               sum(r.checked for r in sub))
    f, leaves = _build_scenario(module, dims, seed)
    if module == "model" and max_coords is None:
        max_coords = 250
    return _finite_diff_report(module, f, leaves, epsilon, seed, max_coords)


def _rand(shape, seed_parts, scale=1.0):
    gen = core.torch_generator(*seed_parts)
    return torch.randn(shape, generator=gen, dtype=torch.float64) * scale


def _projection(shape, seed):
    return _rand(shape, (seed, "proj"))


def _module_scenario(block, inputs: dict[str, torch.Tensor], seed, call=None):
    block = block.double().eval()
    leaves = dict(inputs)
    leaves.update({f"param:{k}": p for k, p in block.named_parameters()})
    proj = {}

    def f():
        out = call(block, inputs) if call else block(*inputs.values())
        if "w" not in proj:
            proj["w"] = _projection(out.shape, seed)
        return (out * proj["w"]).sum()

    return f, leaves


def _build_scenario(module, dims, seed):
    c, h, w = dims
    x = _rand((c, h, w), (seed, "x"))

    if module == "softmax":
        w1 = _projection((c, h, w), seed)

        def f():
            return (core.softmax(x, "channel") * w1).sum() + (core.softmax(x, "spatial") * w1).sum()

        return f, {"x": x}

    if module == "sdpa":
        w1 = _projection((c, h, w), seed)
        return (lambda: (core.sdpa(x) * w1).sum()), {"x": x}

    if module == "global_avg_pool":
        w1 = _projection((c,), seed)
        return (lambda: (core.global_avg_pool(x) * w1).sum()), {"x": x}

    if module == "upsample":
        w1 = _projection((c, 2 * h + 1, 2 * w), seed)
        return (lambda: (core.upsample(x, 2 * h + 1, 2 * w) * w1).sum()), {"x": x}

    if module == "batch_norm":
        state = core.NormLayerState.identity(c, mode="eval", dtype=torch.float64)
        state.running_mean = _rand((c,), (seed, "mean"), 0.3)
        state.running_var = 0.5 + _rand((c,), (seed, "var")) ** 2
        scale = 1.0 + 0.1 * _rand((c,), (seed, "scale"))
        shift = 0.1 * _rand((c,), (seed, "shift"))
        state.scale, state.shift = scale, shift
        w1 = _projection((c, h, w), seed)
        return (lambda: (core.batch_norm(x, state) * w1).sum()), {"x": x, "scale": scale, "shift": shift}

    if module == "encoder":
        block = ResidualBlock(c, c, stride=2)
        core.init_parameters(block, seed)
        return _module_scenario(block, {"x": x.unsqueeze(0)}, seed,
                                call=lambda b, ins: b(ins["x"]))

    if module == "tde":
        block = TdeBlock(c)
        core.init_parameters(block, seed)
        t1, t2 = x, _rand((c, h, w), (seed, "y"))
        return _module_scenario(block, {"t1": t1, "t2": t2}, seed)

    if module == "ifr":
        block = IfrBlock(c)
        core.init_parameters(block, seed)
        return _module_scenario(block, {"f1": x, "f2": _rand((c, h, w), (seed, "y"))}, seed)

    if module == "itff":
        block = ItffBlock(c)
        core.init_parameters(block, seed)
        return _module_scenario(block, {"t": x, "f": _rand((c, h, w), (seed, "y"))}, seed)

    if module == "fallback":
        block = FusionFallback(c)
        core.init_parameters(block, seed)
        return _module_scenario(block, {"a": x, "b": _rand((c, h, w), (seed, "y"))}, seed)

    if module == "model":
        config = ModelConfig(widths=(8, 8, 8, 8), text_dim=16, hash_buckets=64, seed=seed)
        net = build_model(config, dtype=torch.float64).eval()
        img_a = 0.5 + 0.25 * _rand((3, 32, 32), (seed, "img_a"))
        img_b = 0.5 + 0.25 * _rand((3, 32, 32), (seed, "img_b"))
        caps = (["two buildings near a road"], ["three buildings near a road"])
        inputs = {"img_a": img_a, "img_b": img_b}
        return _module_scenario(
            net, inputs, seed,
            call=lambda b, ins: b(ins["img_a"], ins["img_b"], caps[0], caps[1]),
        )

    raise ValueError(f"unknown gradcheck module {module!r}; choose from {GRADCHECK_MODULES}")


def _finite_diff_report(module, f, leaves, epsilon, seed, max_coords) -> GradCheckReport:
    for t in leaves.values():
        t.requires_grad_(True)
        t.grad = None
    loss = f()
    loss.backward()
    analytic = {
        k: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
        for k, t in leaves.items()
    }

    coords = [(name, i) for name, t in leaves.items() for i in range(t.numel())]
    if max_coords is not None and len(coords) > max_coords:
        rng = core.np_rng(seed, "coords", module)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in picks]

    worst = 0.0
    worst_coord = ""
    with torch.no_grad():
        for name, i in coords:
            flat = leaves[name].reshape(-1)
            orig = flat[i].item()
            flat[i] = orig + epsilon
            f_plus = f().item()
            flat[i] = orig - epsilon
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * epsilon)
            ad = analytic[name].reshape(-1)[i].item()
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-3)
            if rel > worst:
                worst = rel
                worst_coord = f"{name}[{i}]"
    return GradCheckReport(module, worst, worst_coord, len(coords))
