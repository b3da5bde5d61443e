"""Shared differentiable primitives and deterministic seeding helpers.

Feature maps are plain torch tensors laid out ``(C, H, W)``, or ``(N, C, H, W)``
when batched. The channel axis is always ``-3`` and the spatial axes are
``(-2, -1)``, so every primitive here accepts either layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; fixed across runs and platforms."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(*parts) -> int:
    """Collapse a tuple of ints/strings into one stable 64-bit seed."""
    return fnv1a64("/".join(str(p) for p in parts).encode("utf-8"))


def np_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


def torch_generator(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts) & 0x7FFFFFFFFFFFFFFF)
    return gen


def softmax(x: torch.Tensor, axis: str = "channel") -> torch.Tensor:
    """Softmax over the channel axis or over all spatial positions jointly."""
    if axis == "channel":
        return torch.softmax(x, dim=-3)
    if axis == "spatial":
        h, w = x.shape[-2:]
        flat = torch.softmax(x.reshape(*x.shape[:-2], h * w), dim=-1)
        return flat.reshape(*x.shape)
    raise ValueError(f"unknown softmax axis {axis!r}; expected 'channel' or 'spatial'")


def sdpa(x: torch.Tensor) -> torch.Tensor:
    """Single-head scaled dot-product self-attention over spatial positions.

    The H*W positions are the tokens and Q = K = V = x, so the output keeps
    the input's shape and permuting positions permutes the output identically.
    """
    batched = x.dim() == 4
    y = x if batched else x.unsqueeze(0)
    n, c, h, w = y.shape
    tokens = y.reshape(n, c, h * w).transpose(1, 2)  # (n, hw, c)
    attn = torch.softmax(tokens @ tokens.transpose(1, 2) / math.sqrt(c), dim=-1)
    out = (attn @ tokens).transpose(1, 2).reshape(n, c, h, w)
    return out if batched else out.squeeze(0)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel: (..., C, H, W) -> (..., C)."""
    return x.mean(dim=(-2, -1))


def upsample(x: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinear upsampling (align_corners disabled). Rejects shrinking targets."""
    h, w = x.shape[-2:]
    if target_h < h or target_w < w:
        raise ValueError(f"upsample target ({target_h}, {target_w}) smaller than source ({h}, {w})")
    if target_h == h and target_w == w:
        return x
    batched = x.dim() == 4
    y = x if batched else x.unsqueeze(0)
    out = F.interpolate(y, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return out if batched else out.squeeze(0)


@dataclass
class NormLayerState:
    """Per-channel batch-norm state with the usual train/eval split.

    Identity-initialized (scale=1, shift=0, mean=0, var=1), so a fresh state
    in eval mode maps 0 to 0. Train mode normalizes by biased batch moments
    and folds the unbiased variance into the running estimate.
    """

    scale: torch.Tensor
    shift: torch.Tensor
    running_mean: torch.Tensor
    running_var: torch.Tensor
    mode: str = "eval"
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int, mode: str = "eval", dtype=torch.float32) -> "NormLayerState":
        return cls(
            scale=torch.ones(channels, dtype=dtype),
            shift=torch.zeros(channels, dtype=dtype),
            running_mean=torch.zeros(channels, dtype=dtype),
            running_var=torch.ones(channels, dtype=dtype),
            mode=mode,
        )


def batch_norm(x: torch.Tensor, state: NormLayerState) -> torch.Tensor:
    if state.epsilon <= 0:
        raise ValueError("epsilon must be positive")
    c = x.shape[-3]
    shape = [1] * x.dim()
    shape[-3] = c
    reduce_dims = tuple(d for d in range(x.dim()) if d != x.dim() - 3)
    if state.mode == "train":
        n = x.numel() // c
        if n < 2:
            raise ValueError("train-mode batch norm needs at least 2 elements per channel")
        mean = x.mean(dim=reduce_dims)
        var = x.var(dim=reduce_dims, unbiased=False)
        with torch.no_grad():
            m = state.momentum
            state.running_mean.mul_(1 - m).add_(m * mean.detach())
            state.running_var.mul_(1 - m).add_(m * var.detach() * n / (n - 1))
    else:
        mean = state.running_mean
        var = state.running_var
    x_hat = (x - mean.reshape(shape)) / torch.sqrt(var.reshape(shape) + state.epsilon)
    return x_hat * state.scale.reshape(shape) + state.shift.reshape(shape)


class PaddedConv2d(nn.Module):
    """Bias-free conv whose padding preserves constant maps.

    Reflection padding is used whenever the map is large enough; maps too
    small to reflect (pad >= dim, e.g. 1x1 levels of small inputs) fall back
    to replication. Both send constants to constants and zeros to zeros.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, groups: int = 1):
        super().__init__()
        self.pad = (kernel_size - 1) // 2
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, groups=groups, bias=False)

    def forward(self, x):
        if self.pad > 0:
            h, w = x.shape[-2:]
            mode = "reflect" if min(h, w) > self.pad else "replicate"
            x = F.pad(x, [self.pad] * 4, mode=mode)
        return self.conv(x)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic parameter init, independent of module traversal order.

    Conv/linear/embedding weights draw from a fan-in-scaled uniform
    distribution; norm layers are reset to the identity. Each tensor's
    stream is keyed by (seed, qualified parameter name), so two models with
    the same config and seed are parameter-identical.
    """
    for name, sub in module.named_modules():
        if isinstance(sub, nn.modules.batchnorm._BatchNorm):
            with torch.no_grad():
                sub.weight.fill_(1.0)
                sub.bias.fill_(0.0)
                sub.running_mean.fill_(0.0)
                sub.running_var.fill_(1.0)
                sub.num_batches_tracked.fill_(0)
            continue
        for attr, fan_in in _fan_ins(sub):
            weight = getattr(sub, attr)
            pname = f"{name}.{attr}" if name else attr
            gen = torch_generator(seed, pname)
            # init_scale lets heads start near zero (near-uniform predictions)
            bound = getattr(sub, "init_scale", 1.0) / math.sqrt(fan_in)
            with torch.no_grad():
                weight.uniform_(-bound, bound, generator=gen)


def _fan_ins(sub: nn.Module):
    if isinstance(sub, nn.Conv2d):
        k = sub.kernel_size[0] * sub.kernel_size[1]
        yield "weight", (sub.in_channels // sub.groups) * k
    elif isinstance(sub, nn.Linear):
        yield "weight", sub.in_features
    elif isinstance(sub, nn.Embedding):
        yield "weight", sub.embedding_dim
