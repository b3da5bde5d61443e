"""Text Difference Enhancement: amplify the gap between two temporal text maps.

The block consumes only the difference of its two inputs, upsamples it 2x
(or to an explicit target grid), runs two independently parameterized
conv+BN branches plus spatial self-attention over the upsampled difference,
and recombines them into a non-negative enhanced difference map.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PaddedConv2d, sdpa, upsample


class TdeBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        # the two branches must not share weights, or their difference is zero
        self.branch1_conv = PaddedConv2d(channels, channels, 3)
        self.branch1_bn = nn.BatchNorm2d(channels)
        self.branch2_conv = PaddedConv2d(channels, channels, 3)
        self.branch2_bn = nn.BatchNorm2d(channels)
        self.gap_conv = PaddedConv2d(channels, channels, 3)
        self.gap_bn = nn.BatchNorm2d(channels)
        self.merge_conv = PaddedConv2d(2 * channels, channels, 3)
        self.out_conv = PaddedConv2d(channels, channels, 3)
        self.out_bn = nn.BatchNorm2d(channels)

    def forward(self, t1: torch.Tensor, t2: torch.Tensor, out_hw: tuple[int, int] | None = None):
        if t1.shape != t2.shape:
            raise ValueError(f"text feature shapes differ: {tuple(t1.shape)} vs {tuple(t2.shape)}")
        if t1.shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {t1.shape[-3]}")
        batched = t1.dim() == 4
        if not batched:
            t1, t2 = t1.unsqueeze(0), t2.unsqueeze(0)

        d = t1 - t2
        h, w = d.shape[-2:]
        th, tw = out_hw if out_hw is not None else (2 * h, 2 * w)
        up = upsample(d, th, tw)

        a = F.relu(self.branch1_bn(self.branch1_conv(up)))
        b = F.relu(self.branch2_bn(self.branch2_conv(up)))
        attn = sdpa(up)
        gap = F.relu(self.gap_bn(self.gap_conv(a - b)))
        merged = self.merge_conv(torch.cat([a + a * gap, b + b * gap], dim=-3))
        out = F.relu(self.out_bn(self.out_conv(merged * attn)))
        return out if batched else out.squeeze(0)
