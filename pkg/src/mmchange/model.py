"""Full change-detection network assembly plus checkpoint persistence.

Pipeline per scale: image encoder pair -> IFR (or 1x1+add fallback),
text encoder pair -> TDE (or upsampled fallback), then ITFF (or fallback),
and a top-down decoder merging the fused pyramid into 2-channel logits at
input resolution. Ablation flags swap any module for the fallback; dropping
the text branch entirely yields the image-only baseline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .core import init_parameters, upsample
from .encoders import ImageEncoder, TextEncoder, level_dims
from .ifr import IfrBlock
from .itff import ItffBlock
from .tde import TdeBlock

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
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
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if len(self.widths) != 4:
            raise ValueError("widths must have 4 entries")
        for w in self.widths:
            if w <= 0 or w % 4 != 0:
                raise ValueError(f"each width must be a positive multiple of 4, got {self.widths}")
            if w % self.reduction != 0:
                raise ValueError(f"width {w} not divisible by reduction {self.reduction}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d).validate()

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_flags(self, **flags) -> "ModelConfig":
        return replace(self, **flags)


class FusionFallback(nn.Module):
    """Ablation replacement: independent 1x1 projections, element-wise added."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj_a = nn.Conv2d(channels, channels, 1, bias=False)
        self.proj_b = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"fallback input shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        batched = a.dim() == 4
        if not batched:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        out = self.proj_a(a) + self.proj_b(b)
        return out if batched else out.squeeze(0)


class Decoder(nn.Module):
    """Top-down merge of the fused pyramid into full-resolution logits."""

    def __init__(self, widths):
        super().__init__()
        self.laterals = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i - 1], 1, bias=False) for i in (3, 2, 1)
        )
        self.fuses = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(widths[i - 1], widths[i - 1], 3, padding=1, bias=False),
                nn.BatchNorm2d(widths[i - 1]),
                nn.ReLU(inplace=True),
            )
            for i in (3, 2, 1)
        )
        self.head = nn.Conv2d(widths[0], 2, 1, bias=False)
        self.head.init_scale = 0.1  # start near-uniform: logit scale stays small

    def forward(self, levels, out_hw):
        x = levels[3]
        for lateral, fuse, shallow in zip(self.laterals, self.fuses, (levels[2], levels[1], levels[0])):
            x = lateral(upsample(x, *shallow.shape[-2:]))
            x = fuse(x + shallow)
        return self.head(upsample(x, *out_hw))


class ChangeDetector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths
        self.image_encoder = ImageEncoder(widths)
        if config.use_ifr:
            self.image_merge = nn.ModuleList(
                IfrBlock(c, softmax_axis=config.ifr_softmax_axis) for c in widths
            )
        else:
            self.image_merge = nn.ModuleList(FusionFallback(c) for c in widths)
        if config.use_text:
            self.text_encoder = TextEncoder(widths, config.text_dim, config.hash_buckets)
            if config.use_tde:
                self.text_merge = nn.ModuleList(TdeBlock(c) for c in widths)
            else:
                self.text_merge = nn.ModuleList(FusionFallback(c) for c in widths)
            if config.use_itff:
                self.fusion = nn.ModuleList(
                    ItffBlock(c, config.reduction, config.spatial_kernel) for c in widths
                )
            else:
                self.fusion = nn.ModuleList(FusionFallback(c) for c in widths)
        self.decoder = Decoder(widths)

    def forward(self, img_a, img_b, captions_a=None, captions_b=None, return_gate=False):
        if img_a.shape != img_b.shape:
            raise ValueError(f"image shapes differ: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
        batched = img_a.dim() == 4
        if not batched:
            img_a, img_b = img_a.unsqueeze(0), img_b.unsqueeze(0)
        h, w = img_a.shape[-2:]

        levels_a = self.image_encoder(img_a)
        levels_b = self.image_encoder(img_b)
        image_feats = [merge(a, b) for merge, a, b in zip(self.image_merge, levels_a, levels_b)]

        gate = None
        if self.config.use_text:
            captions_a = self._check_captions(captions_a, img_a.shape[0])
            captions_b = self._check_captions(captions_b, img_b.shape[0])
            text_a = self.text_encoder(captions_a, (h, w))
            text_b = self.text_encoder(captions_b, (h, w))
            fused = []
            for i, (lh, lw) in enumerate(level_dims(h, w)):
                if self.config.use_tde:
                    t = self.text_merge[i](text_a[i], text_b[i], out_hw=(lh, lw))
                else:
                    t = upsample(self.text_merge[i](text_a[i], text_b[i]), lh, lw)
                if self.config.use_itff:
                    out, g = self.fusion[i](t, image_feats[i], return_gate=True)
                    if i == 0:
                        gate = g
                else:
                    out = self.fusion[i](t, image_feats[i])
                fused.append(out)
        else:
            fused = image_feats

        logits = self.decoder(fused, (h, w))
        if not batched:
            logits = logits.squeeze(0)
            gate = gate.squeeze(0) if gate is not None else None
        return (logits, gate) if return_gate else logits

    def _check_captions(self, captions, n):
        if captions is None:
            raise ValueError("captions required when the text branch is enabled")
        if isinstance(captions, str):
            captions = [captions] * n
        if len(captions) != n:
            raise ValueError(f"expected {n} captions, got {len(captions)}")
        return captions


def build_model(config: ModelConfig, dtype=torch.float32) -> ChangeDetector:
    model = ChangeDetector(config)
    init_parameters(model, config.seed)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over (no-change, change) logits; ties go to no-change."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    if logits.shape[-3] != 2:
        raise ValueError(f"expected 2 logit channels, got {logits.shape[-3]}")
    change = np.take(logits, 1, axis=-3)
    nochange = np.take(logits, 0, axis=-3)
    return (change > nochange).astype(np.uint8)


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: ChangeDetector, step: int = 0, optimizer_state: dict | None = None) -> None:
    config_json = json.dumps(model.config.to_dict(), sort_keys=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_json": config_json,
        "config_hash": hashlib.sha256(config_json.encode()).hexdigest(),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "step": step,
        "optimizer_state": optimizer_state,
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None, force: bool = False):
    """Rebuild a model from disk; returns (model, step, optimizer_state).

    The stored config hash is always verified against the stored snapshot;
    a caller-supplied expected config must also hash-match unless `force`.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    config_json = payload["config_json"]
    if hashlib.sha256(config_json.encode()).hexdigest() != payload["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch (corrupt or edited checkpoint)")
    config = ModelConfig.from_dict(json.loads(config_json))
    if expected_config is not None and expected_config.config_hash() != config.config_hash() and not force:
        raise CheckpointError(
            f"{path}: checkpoint config does not match the requested config (pass force to override)"
        )
    model = ChangeDetector(config)
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload["step"], payload.get("optimizer_state")
