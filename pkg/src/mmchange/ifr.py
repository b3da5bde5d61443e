"""Image Feature Refinement: sharpen the bitemporal image-feature difference.

Difference-only by construction. A grouped residual refinement (4 groups)
runs over a channel-softmax attention product, and a squeeze-style sigmoid
gate rescales each channel, so the output magnitude never exceeds the
pre-gate feature anywhere.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PaddedConv2d, global_avg_pool, softmax

GROUPS = 4


class IfrBlock(nn.Module):
    def __init__(self, channels: int, softmax_axis: str = "channel"):
        super().__init__()
        if channels % GROUPS != 0:
            raise ValueError(f"channels must be divisible by {GROUPS}, got {channels}")
        self.channels = channels
        self.softmax_axis = softmax_axis
        self.refine_conv = PaddedConv2d(channels, channels, 3)
        self.refine_bn = nn.BatchNorm2d(channels)
        self.proj_conv = PaddedConv2d(channels, channels, 3)
        self.proj_bn = nn.BatchNorm2d(channels)
        self.mix_conv = nn.Conv2d(2 * channels, channels, 1, bias=False)
        self.group_conv = PaddedConv2d(channels, channels, 3, groups=GROUPS)
        self.group_bn = nn.BatchNorm2d(channels)

    def forward(self, f1: torch.Tensor, f2: torch.Tensor, return_pre_gate: bool = False):
        if f1.shape != f2.shape:
            raise ValueError(f"image feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        if f1.shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {f1.shape[-3]}")
        batched = f1.dim() == 4
        if not batched:
            f1, f2 = f1.unsqueeze(0), f2.unsqueeze(0)

        d = f1 - f2
        refined = F.relu(self.refine_bn(self.refine_conv(d)))
        stacked = torch.cat([refined, d], dim=-3)
        proj = self.proj_bn(self.proj_conv(d))
        attn = softmax(self.mix_conv(stacked) * proj, axis=self.softmax_axis)
        grouped = F.relu(self.group_bn(self.group_conv(attn))) + refined
        gate = torch.sigmoid(global_avg_pool(grouped))
        out = gate[:, :, None, None] * grouped
        if not batched:
            out, grouped = out.squeeze(0), grouped.squeeze(0)
        return (out, grouped) if return_pre_gate else out
