"""Synthetic bitemporal dataset: procedural scenes with exact change masks.

Each sample is derived from a deterministic per-index RNG stream, so
generation is order-independent and regeneration is byte-identical. Scenes
place flat-colored polygonal objects (buildings, roads, vegetation) on a
textured background; a subset of objects appears in only one of the two
times and the ground-truth mask is exactly the union of those footprints.
Captions are templated from the object counts visible at each time, which
is what makes the text modality carry real change signal.

On-disk layout:
    <root>/A/<id>.png, <root>/B/<id>.png        8-bit RGB
    <root>/label/<id>.png                        0/255 binary
    <root>/captions.jsonl                        {"id", "t1", "t2"} per line
    <root>/manifest.json                         {"count", "size", "seed", "format_version": 1}
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import np_rng

DATASET_FORMAT_VERSION = 1

_BUILDING_COLORS = [(0.62, 0.62, 0.64), (0.58, 0.35, 0.28), (0.44, 0.46, 0.48), (0.78, 0.76, 0.72)]
_VEGETATION_COLORS = [(0.18, 0.38, 0.20), (0.25, 0.45, 0.22), (0.14, 0.32, 0.18)]
_ROAD_COLOR = (0.25, 0.25, 0.27)


@dataclass
class BiTemporalSample:
    image_a: np.ndarray  # (3, H, W) float32 in [0, 1]
    image_b: np.ndarray
    caption_a: str
    caption_b: str
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str = ""

    def validate(self) -> "BiTemporalSample":
        if self.image_a.shape != self.image_b.shape:
            raise ValueError("image shapes differ")
        if self.image_a.shape[1:] != self.mask.shape:
            raise ValueError("mask dims do not match images")
        if not self.caption_a or not self.caption_b:
            raise ValueError("captions must be non-empty")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        return self


@dataclass
class SceneObject:
    kind: str  # building | road | vegetation
    polygon: np.ndarray  # (k, 2) float (x, y) vertices
    color: tuple[float, float, float]
    in_a: bool
    in_b: bool

    @property
    def changed(self) -> bool:
        return self.in_a != self.in_b


@dataclass
class SceneSpec:
    seed: int
    index: int
    size: int
    objects: list[SceneObject] = field(default_factory=list)


def rasterize_polygon(polygon: np.ndarray, size: int) -> np.ndarray:
    """Boolean footprint: pixel (r, c) is inside iff its center (c+.5, r+.5)
    has an odd crossing number against the polygon edges."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.zeros((size, size), dtype=bool)
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        crosses = (y1 <= py) != (y2 <= py)
        if y2 != y1:
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < xint)
    return inside


def _rect_polygon(cx, cy, w, h, angle) -> np.ndarray:
    ca, sa = math.cos(angle), math.sin(angle)
    corners = [(-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)]
    return np.array([(cx + ca * dx - sa * dy, cy + sa * dx + ca * dy) for dx, dy in corners])


def _blob_polygon(cx, cy, radius, rng) -> np.ndarray:
    angles = np.linspace(0.0, 2 * math.pi, 12, endpoint=False)
    radii = radius * rng.uniform(0.85, 1.15, size=12)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def _bbox(polygon) -> tuple[float, float, float, float]:
    return (polygon[:, 0].min(), polygon[:, 1].min(), polygon[:, 0].max(), polygon[:, 1].max())


def _bboxes_overlap(a, b, margin=1.0) -> bool:
    return not (a[2] + margin < b[0] or b[2] + margin < a[0] or a[3] + margin < b[1] or b[3] + margin < a[1])


def _jitter(color, rng, amount=0.05):
    return tuple(float(np.clip(c + rng.uniform(-amount, amount), 0.02, 0.98)) for c in color)


def build_scene(seed: int, index: int, size: int) -> SceneSpec:
    """Deterministic scene layout for one sample; RNG keyed by (seed, index)."""
    rng = np_rng(seed, "scene", index)
    objects: list[SceneObject] = []

    for _ in range(rng.integers(0, 3)):
        angle = rng.uniform(0, math.pi)
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
        poly = _rect_polygon(cx, cy, 3.0 * size, rng.uniform(0.04, 0.07) * size, angle)
        objects.append(SceneObject("road", poly, _jitter(_ROAD_COLOR, rng, 0.03), True, True))

    placed_boxes: list[tuple] = []
    changeable: list[SceneObject] = []
    n_buildings = int(rng.integers(2, 6))
    n_vegetation = int(rng.integers(1, 4))
    for kind, count in (("building", n_buildings), ("vegetation", n_vegetation)):
        for _ in range(count):
            for _attempt in range(40):
                cx, cy = rng.uniform(0.08 * size, 0.92 * size, size=2)
                if kind == "building":
                    w = rng.uniform(0.18, 0.34) * size
                    h = rng.uniform(0.18, 0.34) * size
                    poly = _rect_polygon(cx, cy, w, h, rng.uniform(0, math.pi / 2))
                    color = _jitter(_BUILDING_COLORS[rng.integers(len(_BUILDING_COLORS))], rng)
                else:
                    poly = _blob_polygon(cx, cy, rng.uniform(0.11, 0.18) * size, rng)
                    color = _jitter(_VEGETATION_COLORS[rng.integers(len(_VEGETATION_COLORS))], rng)
                box = _bbox(poly)
                if not any(_bboxes_overlap(box, other) for other in placed_boxes):
                    placed_boxes.append(box)
                    obj = SceneObject(kind, poly, color, True, True)
                    objects.append(obj)
                    changeable.append(obj)
                    break

    if not changeable:
        # degenerate placement; drop in one centered building so every scene
        # has at least one changeable object
        side = 0.25 * size
        obj = SceneObject(
            "building",
            _rect_polygon(size / 2, size / 2, side, side, 0.0),
            _BUILDING_COLORS[0],
            True,
            True,
        )
        objects.append(obj)
        changeable.append(obj)

    for obj in changeable:
        roll = rng.uniform()
        if roll < 0.35:
            obj.in_a = False
        elif roll < 0.7:
            obj.in_b = False
    if not any(o.changed for o in changeable):
        pick = changeable[int(rng.integers(len(changeable)))]
        pick.in_a = False

    return SceneSpec(seed=seed, index=index, size=size, objects=objects)


def _caption_from_counts(counts: dict[str, int]) -> str:
    names = {
        "building": ("building", "buildings"),
        "road": ("road", "roads"),
        "vegetation": ("vegetation patch", "vegetation patches"),
    }
    parts = [f"{n} {names[k][0 if n == 1 else 1]}" for k, n in counts.items() if n > 0]
    if not parts:
        return "This is open ground with no buildings."
    if len(parts) == 1:
        return f"These are {parts[0]}."
    return "These are " + ", ".join(parts[:-1]) + f" and {parts[-1]}."


def render_scene(spec: SceneSpec) -> BiTemporalSample:
    size = spec.size
    rng = np_rng(spec.seed, "render", spec.index)

    # shared background: directional two-tone gradient plus fine texture
    theta = rng.uniform(0, 2 * math.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    ramp = (np.cos(theta) * xs + np.sin(theta) * ys + 1) / 2
    lo = np.array([0.34, 0.31, 0.27]) + rng.uniform(-0.03, 0.03, size=3)
    hi = np.array([0.46, 0.43, 0.37]) + rng.uniform(-0.03, 0.03, size=3)
    background = lo[:, None, None] + (hi - lo)[:, None, None] * ramp[None]
    background += rng.uniform(-0.02, 0.02, size=(3, size, size))

    footprints = [rasterize_polygon(o.polygon, size) for o in spec.objects]
    images = []
    for present in ("in_a", "in_b"):
        img = background.copy()
        for obj, fp in zip(spec.objects, footprints):
            if getattr(obj, present):
                # photometric nuisance: the same object is repainted slightly
                # differently at each time, so raw image differences alone
                # cannot separate real change from appearance drift
                color = np.array(obj.color) + rng.uniform(-0.03, 0.03, size=3)
                img[:, fp] = np.clip(color, 0.02, 0.98)[:, None]
        # per-time illumination jitter and sensor noise
        img = img * rng.uniform(0.96, 1.04) + rng.uniform(-0.015, 0.015)
        img += rng.normal(0.0, 0.015, size=img.shape)
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))

    mask = np.zeros((size, size), dtype=bool)
    for obj, fp in zip(spec.objects, footprints):
        if obj.changed:
            mask |= fp

    def counts(present):
        c = {"building": 0, "road": 0, "vegetation": 0}
        for obj in spec.objects:
            if getattr(obj, present):
                c[obj.kind] += 1
        return c

    return BiTemporalSample(
        image_a=images[0],
        image_b=images[1],
        caption_a=_caption_from_counts(counts("in_a")),
        caption_b=_caption_from_counts(counts("in_b")),
        mask=mask.astype(np.uint8),
        id=f"{spec.index:05d}",
    ).validate()


def _save_png(path, array_u8):
    Image.fromarray(array_u8).save(path, format="PNG")


def _image_to_u8(img) -> np.ndarray:
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def generate_dataset(seed: int, count: int, size: int, out_dir) -> None:
    if size % 32 != 0:
        raise ValueError(f"size must be divisible by 32, got {size}")
    if count < 0:
        raise ValueError("count must be >= 0")
    for sub in ("A", "B", "label"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    caption_lines = []
    for index in range(count):
        sample = render_scene(build_scene(seed, index, size))
        _save_png(os.path.join(out_dir, "A", f"{sample.id}.png"), _image_to_u8(sample.image_a))
        _save_png(os.path.join(out_dir, "B", f"{sample.id}.png"), _image_to_u8(sample.image_b))
        _save_png(os.path.join(out_dir, "label", f"{sample.id}.png"), sample.mask * np.uint8(255))
        caption_lines.append(
            json.dumps({"id": sample.id, "t1": sample.caption_a, "t2": sample.caption_b})
        )
    with open(os.path.join(out_dir, "captions.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for line in caption_lines:
            fh.write(line + "\n")
    manifest = {"count": count, "size": size, "seed": seed, "format_version": DATASET_FORMAT_VERSION}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True) + "\n")


def load_manifest(root) -> dict:
    with open(os.path.join(root, "manifest.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_sample(root, sample_id: str, captions: dict) -> BiTemporalSample:
    def read_image(sub):
        arr = np.asarray(Image.open(os.path.join(root, sub, f"{sample_id}.png")).convert("RGB"))
        return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)

    label = np.asarray(Image.open(os.path.join(root, "label", f"{sample_id}.png")).convert("L"))
    pair = captions[sample_id]
    return BiTemporalSample(
        image_a=read_image("A"),
        image_b=read_image("B"),
        caption_a=pair.t1,
        caption_b=pair.t2,
        mask=(label > 127).astype(np.uint8),
        id=sample_id,
    ).validate()


def load_dataset(root) -> list[BiTemporalSample]:
    from .encoders import load_captions

    manifest = load_manifest(root)
    captions = load_captions(os.path.join(root, "captions.jsonl"))
    return [load_sample(root, f"{i:05d}", captions) for i in range(manifest["count"])]


def _resize(array: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    if array.shape[-2:] == (out_h, out_w):
        return np.ascontiguousarray(array, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))
    squeeze = t.dim() == 2
    if squeeze:
        t = t[None]
    t = t[None]
    if mode == "nearest":
        out = F.interpolate(t, size=(out_h, out_w), mode="nearest")
    else:
        out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    out = out[0]
    if squeeze:
        out = out[0]
    return out.numpy()


def temporal_swap(sample: BiTemporalSample) -> BiTemporalSample:
    """Exchange the two times (images and captions); the change mask is
    symmetric in time and stays put. Involutive."""
    return BiTemporalSample(
        image_a=sample.image_b,
        image_b=sample.image_a,
        caption_a=sample.caption_b,
        caption_b=sample.caption_a,
        mask=sample.mask,
        id=sample.id,
    )


def augment(sample: BiTemporalSample, rng: np.random.Generator, crop_size: int | None = None) -> BiTemporalSample:
    """Joint flips, random crop-then-resize, and temporal swapping.

    All geometry applies identically to both images and the mask; the
    temporal swap exchanges (image, caption) pairs and keeps the mask, since
    change is symmetric in time.
    """
    img_a, img_b = sample.image_a, sample.image_b
    cap_a, cap_b = sample.caption_a, sample.caption_b
    mask = sample.mask
    h, w = mask.shape

    if rng.uniform() < 0.5:
        img_a, img_b, mask = img_a[:, :, ::-1], img_b[:, :, ::-1], mask[:, ::-1]
    if rng.uniform() < 0.5:
        img_a, img_b, mask = img_a[:, ::-1, :], img_b[:, ::-1, :], mask[::-1, :]

    if crop_size:
        if crop_size > h or crop_size > w:
            raise ValueError(f"crop {crop_size} larger than image {h}x{w}")
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
        sl = np.s_[top : top + crop_size, left : left + crop_size]
        img_a = _resize(img_a[:, sl[0], sl[1]], h, w, "bilinear")
        img_b = _resize(img_b[:, sl[0], sl[1]], h, w, "bilinear")
        mask = _resize(mask[sl], h, w, "nearest").astype(np.uint8)

    out = BiTemporalSample(
        image_a=np.ascontiguousarray(img_a, dtype=np.float32),
        image_b=np.ascontiguousarray(img_b, dtype=np.float32),
        caption_a=cap_a,
        caption_b=cap_b,
        mask=np.ascontiguousarray(mask, dtype=np.uint8),
        id=sample.id,
    )
    if rng.uniform() < 0.5:
        out = temporal_swap(out)
    return out


def perturb(
    sample: BiTemporalSample,
    noise_sigma: float = 0.0,
    brightness_delta: float = 0.0,
    contrast_factor: float = 1.0,
    rng: np.random.Generator | None = None,
) -> BiTemporalSample:
    """Illumination shift then additive Gaussian noise on both images.

    Mask and captions are untouched; sigma=0, delta=0, factor=1 is the
    identity."""
    if noise_sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if noise_sigma > 0 and rng is None:
        rng = np_rng("perturb", sample.id)

    def apply(img):
        out = np.clip(contrast_factor * (img - 0.5) + 0.5 + brightness_delta, 0.0, 1.0)
        if noise_sigma > 0:
            out = np.clip(out + rng.normal(0.0, noise_sigma, size=out.shape), 0.0, 1.0)
        return out.astype(np.float32)

    return BiTemporalSample(
        image_a=apply(sample.image_a),
        image_b=apply(sample.image_b),
        caption_a=sample.caption_a,
        caption_b=sample.caption_b,
        mask=sample.mask,
        id=sample.id,
    )
