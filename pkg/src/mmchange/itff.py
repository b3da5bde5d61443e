"""Image-Text Feature Fusion through channel, spatial and pixel attention.

Both inputs enter only through their element-wise sum TF, so fusion is
symmetric in its arguments. Channel and spatial gates are broadcast-added
into a saliency map, which is concatenated with TF and squeezed through a
1x1 conv + sigmoid into a per-pixel gate on TF.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PaddedConv2d, global_avg_pool


class SpatialAttention(nn.Module):
    """sigmoid(conv7x7(cat(channel-mean, channel-max))) -> (N, 1, H, W)."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = PaddedConv2d(2, 1, kernel_size)

    def forward(self, x):
        mean = x.mean(dim=-3, keepdim=True)
        peak = x.max(dim=-3, keepdim=True).values
        return torch.sigmoid(self.conv(torch.cat([mean, peak], dim=-3)))


class ChannelAttention(nn.Module):
    """Squeeze-style gate: sigmoid(fc(relu(fc(gap(x))))) -> (N, C, 1, 1)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.squeeze = nn.Conv2d(channels, channels // reduction, 1, bias=False)
        self.excite = nn.Conv2d(channels // reduction, channels, 1, bias=False)

    def forward(self, x):
        pooled = global_avg_pool(x)[:, :, None, None]
        return torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))


class ItffBlock(nn.Module):
    def __init__(self, channels: int, reduction: int = 4, spatial_kernel: int = 7):
        super().__init__()
        self.channels = channels
        self.channel_attn = ChannelAttention(channels, reduction)
        self.spatial_attn = SpatialAttention(spatial_kernel)
        self.pixel_conv = nn.Conv2d(2 * channels, channels, 1, bias=False)
        self.out_conv = PaddedConv2d(channels, channels, 3)

    def forward(self, t: torch.Tensor, f: torch.Tensor, return_gate: bool = False):
        if t.shape != f.shape:
            raise ValueError(f"fusion input shapes differ: {tuple(t.shape)} vs {tuple(f.shape)}")
        if t.shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {t.shape[-3]}")
        batched = t.dim() == 4
        if not batched:
            t, f = t.unsqueeze(0), f.unsqueeze(0)

        tf = t + f
        saliency = (self.channel_attn(tf) + self.spatial_attn(tf)).expand_as(tf)
        gate = torch.sigmoid(self.pixel_conv(torch.cat([saliency, tf], dim=-3)))
        out = self.out_conv(tf * gate)
        if not batched:
            out, gate = out.squeeze(0), gate.squeeze(0)
        return (out, gate) if return_gate else out
