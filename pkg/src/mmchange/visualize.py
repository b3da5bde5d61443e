"""Prediction overlays and attention heatmaps.

Overlay colors are pinned: white = true positive, black = true negative,
blue = false negative, red = false positive, so the color classes of an
overlay biject with the confusion categories.
"""

from __future__ import annotations

import numpy as np

WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
RED = (255, 0, 0)
BLUE = (0, 0, 255)

OVERLAY_COLORS = {"tp": WHITE, "tn": BLACK, "fp": RED, "fn": BLUE}


def overlay_image(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(H, W) binary masks -> (H, W, 3) uint8 using exactly the four colors."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    out = np.zeros((*p.shape, 3), dtype=np.uint8)
    out[p & g] = WHITE
    out[p & ~g] = RED
    out[~p & g] = BLUE
    return out


def normalize_heatmap(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map pins to 0.5."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def colorize_heatmap(values01: np.ndarray) -> np.ndarray:
    """Blue-to-red colormap: low attention is blue, high is red."""
    v = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    out = np.zeros((*v.shape, 3), dtype=np.uint8)
    out[..., 0] = np.rint(255 * v)
    out[..., 2] = np.rint(255 * (1.0 - v))
    return out
