"""Windowed multi-head correlation between the two feature branches."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class WindowedCorrelation(nn.Module):
    """Scaled dot products between query features and spatially offset keys.

    For each query position p, head i and offset o with |o|_inf <= radius,
    the output holds <Wq_i q(p), Wk_i k(p + o)> / sqrt(head_dim). Offsets
    falling outside the map contribute 0 (zero padding). Channel layout is
    head-major, then offsets row-major: channel = head * (2r+1)^2 +
    (dy+r) * (2r+1) + (dx+r).

    With multihead disabled the projections are the identity, a single
    head is used, and the scale is sqrt(in_channels).
    """

    def __init__(self, in_channels: int, d_k: int, num_heads: int, radius: int, multihead: bool = True):
        super().__init__()
        self.radius = radius
        self.multihead = multihead
        if multihead:
            if d_k % num_heads:
                raise ValueError("d_k must be divisible by num_heads")
            self.num_heads = num_heads
            self.head_dim = d_k // num_heads
            self.proj_q = nn.Conv2d(in_channels, d_k, 1, bias=False)
            self.proj_k = nn.Conv2d(in_channels, d_k, 1, bias=False)
        else:
            self.num_heads = 1
            self.head_dim = in_channels
            self.proj_q = self.proj_k = nn.Identity()
        self.scale = math.sqrt(self.head_dim)

    @property
    def out_channels(self) -> int:
        side = 2 * self.radius + 1
        return side * side * self.num_heads

    def forward(self, query_map: torch.Tensor, key_map: torch.Tensor) -> torch.Tensor:
        if query_map.shape != key_map.shape:
            raise ValueError(f"feature map shapes differ: {query_map.shape} vs {key_map.shape}")
        q = self.proj_q(query_map)
        k = self.proj_k(key_map)
        b, _, h, w = q.shape
        r = self.radius
        q = q.view(b, self.num_heads, self.head_dim, h, w)
        k = k.view(b, self.num_heads, self.head_dim, h, w)
        k_pad = F.pad(k, (r, r, r, r))
        slices = []
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                shifted = k_pad[:, :, :, dy + r : dy + r + h, dx + r : dx + r + w]
                slices.append((q * shifted).sum(dim=2) / self.scale)
        corr = torch.stack(slices, dim=2)  # (B, heads, offsets, H, W)
        return corr.flatten(1, 2)
