"""Operator entry points: data generation, training, evaluation, prediction,
ablation sweeps, gradient checks and visualization exports.

Every command is deterministic given its flags and seed. Exit codes: 0 on
success, 2 on usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import training
from .encoders import load_captions
from .metrics import report_json, report_text
from .model import load_checkpoint, predict_mask
from .visualize import colorize_heatmap, normalize_heatmap, overlay_image

ABLATION_VARIANTS = {
    "full": {},
    "no_ifr": {"use_ifr": False},
    "no_tde": {"use_tde": False},
    "no_itff": {"use_itff": False},
    "image_only": {"use_ifr": False, "use_tde": False, "use_itff": False, "use_text": False},
}


def _env_seed(value):
    if value is not None:
        return value
    return int(os.environ.get("MMCHANGE_SEED", "0"))


def _load_train_config(args, parser) -> training.TrainConfig:
    mapping = training.parse_config_file(args.config) if args.config else {}
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    elif "seed" not in mapping and "MMCHANGE_SEED" in os.environ:
        overrides["seed"] = int(os.environ["MMCHANGE_SEED"])
    if getattr(args, "steps", None) is not None:
        overrides["max_iteration"] = args.steps
    if args.image_only and (args.no_tde or args.no_itff or args.no_ifr):
        parser.error("--image-only already disables every module; drop the --no-* flags")
    if args.image_only:
        overrides.update(use_text=False, use_ifr=False, use_tde=False, use_itff=False)
    else:
        if args.no_ifr:
            overrides["use_ifr"] = False
        if args.no_tde:
            overrides["use_tde"] = False
        if args.no_itff:
            overrides["use_itff"] = False
    return training.TrainConfig.from_mapping(mapping, **overrides)


def cmd_gen_data(args) -> int:
    data_mod.generate_dataset(args.seed, args.count, args.size, args.out)
    print(f"wrote {args.count} samples of size {args.size} to {args.out}")
    return 0


def cmd_train(args, parser) -> int:
    cfg = _load_train_config(args, parser)
    samples = data_mod.load_dataset(args.data)
    eval_samples = data_mod.load_dataset(args.eval_data) if args.eval_data else None
    summary = training.train(
        cfg, samples, eval_samples=eval_samples, out_dir=args.out,
        resume=args.resume, resume_force=args.force, log_fn=print,
    )
    print(f"final checkpoint: {summary['checkpoint']}")
    return 0


def _write_reports(out_dir, counts):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval.txt"), "w", encoding="utf-8") as fh:
        fh.write(report_text(counts))
    with open(os.path.join(out_dir, "eval.json"), "w", encoding="utf-8") as fh:
        fh.write(report_json(counts))


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    samples = data_mod.load_dataset(args.data)
    metrics, counts = training.evaluate(
        model, samples, batch_size=args.batch_size,
        noise_sigma=args.noise, brightness_delta=args.brightness,
        contrast_factor=args.contrast, seed=args.seed,
    )
    _write_reports(args.out, counts)
    print(report_text(counts), end="")
    return 0


def _read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _captions_for(args, model):
    if not model.config.use_text:
        return None, None
    if not args.captions:
        raise RuntimeError(
            "this checkpoint was trained with the text branch; pass --captions FILE"
        )
    pairs = load_captions(args.captions)
    stem = os.path.splitext(os.path.basename(args.a))[0]
    if stem in pairs:
        pair = pairs[stem]
    elif len(pairs) == 1:
        pair = next(iter(pairs.values()))
    else:
        raise RuntimeError(f"no caption entry with id {stem!r} in {args.captions}")
    return pair.t1, pair.t2


def cmd_predict(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    img_a, img_b = _read_image(args.a), _read_image(args.b)
    cap_a, cap_b = _captions_for(args, model)
    with torch.no_grad():
        logits = model(torch.from_numpy(img_a), torch.from_numpy(img_b), cap_a, cap_b)
    mask = predict_mask(logits)
    os.makedirs(args.out, exist_ok=True)
    Image.fromarray(mask * np.uint8(255)).save(os.path.join(args.out, "mask.png"))
    if args.label:
        gt = np.asarray(Image.open(args.label).convert("L")) > 127
        overlay = overlay_image(mask.astype(bool), gt)
        Image.fromarray(overlay).save(os.path.join(args.out, "overlay.png"))
    print(f"wrote prediction to {args.out}")
    return 0


def cmd_heatmap(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    if not (model.config.use_text and model.config.use_itff):
        raise RuntimeError("heatmap export needs a checkpoint with the fusion module enabled")
    img_a, img_b = _read_image(args.a), _read_image(args.b)
    cap_a, cap_b = _captions_for(args, model)
    with torch.no_grad():
        _, gate = model(
            torch.from_numpy(img_a), torch.from_numpy(img_b), cap_a, cap_b, return_gate=True
        )
    heat = normalize_heatmap(gate.mean(dim=0).numpy())
    h, w = img_a.shape[-2:]
    heat = data_mod._resize(heat.astype(np.float32), h, w, "bilinear")
    os.makedirs(args.out, exist_ok=True)
    Image.fromarray(colorize_heatmap(heat)).save(os.path.join(args.out, "heatmap.png"))
    print(f"wrote heatmap to {args.out}")
    return 0


def cmd_ablate(args, parser) -> int:
    mapping = training.parse_config_file(args.config) if args.config else {}
    overrides = {}
    if args.steps is not None:
        overrides["max_iteration"] = args.steps
    base = training.TrainConfig.from_mapping(mapping, **overrides)
    samples = data_mod.load_dataset(args.data)
    if args.test_count <= 0 or args.test_count >= len(samples):
        parser.error(f"--test-count must split {len(samples)} samples into two non-empty parts")
    train_set = samples[: len(samples) - args.test_count]
    test_set = samples[len(samples) - args.test_count :]

    os.makedirs(args.out, exist_ok=True)
    rows = []
    failures = []
    for variant, flags in ABLATION_VARIANTS.items():
        for s in range(args.seeds):
            cfg = dataclasses.replace(base, **flags, seed=base.seed + s).validate()
            run_dir = os.path.join(args.out, f"{variant}_seed{base.seed + s}")
            try:
                summary = training.train(cfg, train_set, eval_samples=test_set, out_dir=run_dir)
                metrics, _ = training.evaluate(summary["model"], test_set, batch_size=cfg.batch_size)
                rows.append((variant, base.seed + s, metrics))
                print(f"{variant} seed={base.seed + s} iou={metrics['iou']:.4f} f1={metrics['f1']:.4f}")
            except Exception as e:  # keep the sweep going; report at the end
                failures.append((variant, base.seed + s, str(e)))
                print(f"{variant} seed={base.seed + s} FAILED: {e}", file=sys.stderr)

    table_path = os.path.join(args.out, "ablation.tsv")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("variant\tseed\tiou\tf1\tprecision\trecall\n")
        for variant, seed, m in rows:
            fh.write(
                f"{variant}\t{seed}\t{m['iou']:.6f}\t{m['f1']:.6f}"
                f"\t{m['precision']:.6f}\t{m['recall']:.6f}\n"
            )
    print(f"wrote {table_path}")
    if failures:
        print(f"{len(failures)} variant run(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    dims = tuple(int(p) for p in args.dims.split("x"))
    if len(dims) != 3:
        raise RuntimeError(f"--dims must look like CxHxW, got {args.dims!r}")
    report = training.gradcheck(
        args.module, dims=dims, epsilon=args.epsilon, seed=args.seed, max_coords=args.max_coords
    )
    print(
        f"{report.module}: max rel err {report.max_rel_err:.3e} over "
        f"{report.checked} coordinates (worst at {report.worst_coord})"
    )
    return 0 if report.max_rel_err < args.threshold else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmchange")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic bitemporal dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a change-detection model")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true",
                   help="resume even if the checkpoint config mismatches")
    p.add_argument("--no-ifr", action="store_true")
    p.add_argument("--no-tde", action="store_true")
    p.add_argument("--no-itff", action="store_true")
    p.add_argument("--image-only", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--brightness", type=float, default=0.0)
    p.add_argument("--contrast", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("predict", help="predict a change mask for one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--captions", default=None)
    p.add_argument("--label", default=None, help="ground truth for the 4-color overlay")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train the full model and each ablated variant")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--test-count", type=int, default=32)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", required=True, choices=training.GRADCHECK_MODULES)
    p.add_argument("--dims", default="4x4x4")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-coords", type=int, default=None)

    p = sub.add_parser("heatmap", help="export the finest-scale fusion pixel gate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--captions", default=None)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "seed"):
        args.seed = _env_seed(args.seed) if args.command != "train" else args.seed
    if getattr(args, "command", None) == "gradcheck" and args.threshold is None:
        args.threshold = 1e-3 if args.module == "model" else 1e-4
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "predict":
            return cmd_predict(args)
        if args.command == "ablate":
            return cmd_ablate(args, parser)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "heatmap":
            return cmd_heatmap(args)
        parser.error(f"unknown command {args.command!r}")
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
