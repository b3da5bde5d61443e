"""Pixel-level change-detection evaluation: confusion counts and P/R/IoU/F1.

Counts are summed across a dataset before ratios are taken (micro-averaging),
so partial counts merge associatively. Zero-denominator convention: a metric
whose denominator vanishes is 0, except that a perfectly empty prediction of
an empty ground truth (tp+fp+fn == 0) scores 1 everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fp) if c.tp + c.fp > 0 else 0.0


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else 0.0


def iou(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fn + c.fp)


def f1(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def all_metrics(c: ConfusionCounts) -> dict[str, float]:
    return {"iou": iou(c), "f1": f1(c), "precision": precision(c), "recall": recall(c)}


def report_text(c: ConfusionCounts) -> str:
    """Flat table with metric values as percentages to 2 decimals."""
    m = all_metrics(c)
    lines = [f"{name:<12}{100 * m[name]:>8.2f}" for name in ("iou", "f1", "precision", "recall")]
    lines += [f"{name:<12}{getattr(c, name):>8d}" for name in ("tp", "fp", "fn", "tn")]
    return "\n".join(lines) + "\n"


def report_json(c: ConfusionCounts) -> str:
    """Machine-readable report: raw ratios plus the underlying counts."""
    payload = all_metrics(c)
    payload["counts"] = {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
