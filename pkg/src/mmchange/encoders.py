"""Bitemporal encoders: 4-scale image pyramid and per-scale text feature maps.

The image encoder is a reduced-width residual network producing levels at
strides 4/8/16/32. Text enters as free-form captions; tokens are hashed into
a fixed embedding table, mean-pooled, projected per scale and tiled at half
the matching image grid so the difference-enhancement stage performs a real
2x upsample.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass

import requests
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import fnv1a64

STRIDES = (4, 8, 16, 32)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class CaptionPair:
    id: str
    t1: str
    t2: str


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(out + self.skip(x))


class ImageEncoder(nn.Module):
    """Stem (stride 2) + four stride-2 residual stages -> strides 4/8/16/32."""

    def __init__(self, widths=(16, 32, 64, 128)):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("widths must list 4 stage channel counts")
        if any(w % 4 != 0 for w in widths):
            raise ValueError(f"stage widths must be divisible by 4, got {widths}")
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        cin = widths[0]
        for w in widths:
            stages.append(ResidualBlock(cin, w, stride=2))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"image dims must be divisible by 32, got {h}x{w}")
        batched = x.dim() == 4
        y = x if batched else x.unsqueeze(0)
        levels = []
        y = self.stem(y)
        for stage in self.stages:
            y = stage(y)
            levels.append(y)
        if not batched:
            levels = [lv.squeeze(0) for lv in levels]
        return levels


def level_dims(height: int, width: int) -> list[tuple[int, int]]:
    """Spatial dims of the 4 pyramid levels for a given input size."""
    return [(-(-height // s), -(-width // s)) for s in STRIDES]


def tokenize(caption: str, hash_buckets: int) -> list[int]:
    """Lowercase, split on non-alphanumerics, FNV-1a-64 hash into buckets.

    Deterministic across runs and platforms. An empty caption yields the
    single reserved EMPTY id (== hash_buckets, one past the bucket range).
    """
    tokens = _TOKEN_RE.findall(caption.lower())
    if not tokens:
        return [hash_buckets]
    return [fnv1a64(t.encode("utf-8")) % hash_buckets for t in tokens]


class TextEncoder(nn.Module):
    """Pooled hash-embedding of a caption, projected and tiled per scale.

    Every spatial position of a level carries the same vector, so the text
    pyramid is constant per level and invariant to word order (mean pooling).
    """

    def __init__(self, widths=(16, 32, 64, 128), embed_dim=64, hash_buckets=4096):
        super().__init__()
        self.embed_dim = embed_dim
        self.hash_buckets = hash_buckets
        self.embedding = nn.Embedding(hash_buckets + 1, embed_dim)
        self.proj = nn.ModuleList(nn.Linear(embed_dim, c, bias=False) for c in widths)

    def pool(self, captions: list[str]) -> torch.Tensor:
        dtype = self.embedding.weight.dtype
        pooled = []
        for cap in captions:
            ids = torch.tensor(tokenize(cap, self.hash_buckets), dtype=torch.long)
            pooled.append(self.embedding(ids).mean(dim=0))
        return torch.stack(pooled).to(dtype)

    def forward(self, captions: list[str], image_hw: tuple[int, int]) -> list[torch.Tensor]:
        pooled = self.pool(captions)  # (n, D)
        maps = []
        for proj, (lh, lw) in zip(self.proj, level_dims(*image_hw)):
            vec = proj(pooled)  # (n, C_s)
            th, tw = -(-lh // 2), -(-lw // 2)
            maps.append(vec[:, :, None, None].expand(-1, -1, th, tw))
        return maps


class CaptionFileError(ValueError):
    pass


def load_captions(path) -> dict[str, CaptionPair]:
    """Read a captions.jsonl file: one {"id", "t1", "t2"} object per line."""
    out: dict[str, CaptionPair] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CaptionFileError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            for key in ("id", "t1", "t2"):
                if key not in obj:
                    raise CaptionFileError(f"{path}: line {lineno} missing key {key!r}")
            if obj["id"] in out:
                raise CaptionFileError(f"{path}: duplicate id {obj['id']!r} on line {lineno}")
            out[obj["id"]] = CaptionPair(id=obj["id"], t1=obj["t1"], t2=obj["t2"])
    return out


def append_caption(path, pair: CaptionPair) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"id": pair.id, "t1": pair.t1, "t2": pair.t2}) + "\n")


class CaptionerError(RuntimeError):
    """Raised when the captioning endpoint cannot be reached or rejects a request."""


DEFAULT_PROMPT = "What are the components in this picture?"


def describe_via_captioner(
    image_path,
    endpoint: str,
    prompt: str = DEFAULT_PROMPT,
    temperature: float = 0.2,
    top_p: float = 0.9,
    timeout: float = 10.0,
    retries: int = 3,
) -> str:
    """POST an image to <endpoint>/describe and return the caption text.

    Network failures and timeouts are retried up to `retries` attempts;
    a non-200 response is surfaced immediately with its body. Intended for
    offline caption-file population, never called during training.
    """
    with open(image_path, "rb") as fh:
        payload = {
            "image_b64": base64.b64encode(fh.read()).decode("ascii"),
            "prompt": prompt,
            "temperature": temperature,
            "top_p": top_p,
        }
    url = endpoint.rstrip("/") + "/describe"
    last_err = None
    for _ in range(max(1, retries)):
        try:
            resp = requests.post(url, json=payload, timeout=timeout)
        except requests.RequestException as e:
            last_err = e
            continue
        if resp.status_code != 200:
            raise CaptionerError(f"captioner returned {resp.status_code}: {resp.text}")
        try:
            return resp.json()["caption"]
        except (ValueError, KeyError) as e:
            raise CaptionerError(f"captioner response missing caption field: {resp.text}") from e
    raise CaptionerError(f"captioner unreachable after {retries} attempts: {last_err}")
