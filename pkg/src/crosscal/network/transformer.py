"""Correlation encoding (dense dimension raise + windowed attention) and
the cross-attention pose decoder."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class DenseRaise(nn.Module):
    """Densely connected conv stack lifting correlation channels to d_k.

    Every layer consumes the concatenation of the input and all previous
    layer outputs; a final 1x1 projection sets the token width.
    """

    def __init__(self, in_channels: int, d_k: int, num_layers: int, growth: int):
        super().__init__()
        self.layers = nn.ModuleList()
        ch = in_channels
        for _ in range(num_layers):
            self.layers.append(
                nn.Sequential(
                    nn.Conv2d(ch, growth, 3, padding=1, bias=False),
                    nn.BatchNorm2d(growth),
                    nn.ReLU(inplace=True),
                )
            )
            ch += growth
        self.project = nn.Conv2d(ch, d_k, 1)

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return self.project(torch.cat(feats, dim=1))


def window_partition(x: torch.Tensor, win: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, win*win, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // win, win, w // win, win, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)


def window_reverse(x: torch.Tensor, win: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition back to (B, H, W, C)."""
    b = x.shape[0] // ((h // win) * (w // win))
    x = x.view(b, h // win, w // win, win, win, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside one spatial window with a learned
    relative position bias."""

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.window = window
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

        side = 2 * window - 1
        self.relative_bias = nn.Parameter(torch.zeros(side * side, num_heads))
        coords = torch.stack(
            torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + window - 1
        self.register_buffer("bias_index", rel[0] * side + rel[1], persistent=False)
        nn.init.trunc_normal_(self.relative_bias, std=0.02)

        self.record_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn + self.relative_bias[self.bias_index.reshape(-1)].reshape(
            n, n, self.num_heads
        ).permute(2, 0, 1)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        if self.record_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


def shift_mask(h: int, w: int, win: int, shift: int, device) -> torch.Tensor:
    """Attention mask preventing wrapped-window positions from mixing."""
    img = torch.zeros(1, h, w, 1, device=device)
    region = 0
    for hs in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
        for ws in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
            img[:, hs, ws, :] = region
            region += 1
    windows = window_partition(img, win).squeeze(-1)
    diff = windows[:, None, :] - windows[:, :, None]
    return diff.eq(0).float().log().clamp_min(-1e4)  # 0 where same region, -1e4 otherwise


class SwinBlock(nn.Module):
    """Windowed attention block; odd-indexed blocks use shifted windows."""

    def __init__(self, dim: int, num_heads: int, window: int, shifted: bool, mlp_ratio: int = 4):
        super().__init__()
        self.window = window
        self.shift = window // 2 if shifted else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        shortcut = x
        grid = self.norm1(x).view(b, h, w, c)
        if self.shift:
            grid = torch.roll(grid, (-self.shift, -self.shift), dims=(1, 2))
            mask = shift_mask(h, w, self.window, self.shift, x.device)
        else:
            mask = None
        windows = window_partition(grid, self.window)
        windows = self.attn(windows, mask)
        grid = window_reverse(windows, self.window, h, w)
        if self.shift:
            grid = torch.roll(grid, (self.shift, self.shift), dims=(1, 2))
        x = shortcut + grid.reshape(b, n, c)
        return x + self.mlp(self.norm2(x))


class CorrelationEncoder(nn.Module):
    """Dimension raise + optional windowed-attention stack over the grid.

    Returns (tokens, (h, w)) with tokens of shape (B, h*w, d_k). With zero
    encoder layers the tokens are the dimension-raised features unchanged.
    """

    def __init__(self, in_channels: int, cfg):
        super().__init__()
        self.raise_dim = DenseRaise(in_channels, cfg.d_k, cfg.dense_layers, cfg.dense_growth)
        layers = cfg.encoder_layers if cfg.use_encoder else 0
        self.blocks = nn.ModuleList(
            SwinBlock(cfg.d_k, cfg.num_heads, cfg.attn_window, shifted=bool(i % 2), mlp_ratio=cfg.mlp_ratio)
            for i in range(layers)
        )

    def forward(self, corr: torch.Tensor):
        feat = self.raise_dim(corr)
        b, c, h, w = feat.shape
        tokens = feat.flatten(2).transpose(1, 2)
        for block in self.blocks:
            tokens = block(tokens, h, w)
        return tokens, (h, w)


class PositionMLP(nn.Module):
    """Normalized (x, y) grid coordinates -> d_k embedding added to keys."""

    def __init__(self, d_k: int, hidden: int, feature_wh: tuple[int, int]):
        super().__init__()
        w, h = feature_wh
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=torch.float32),
            torch.arange(w, dtype=torch.float32),
            indexing="ij",
        )
        coords = torch.stack([xs / max(w - 1, 1), ys / max(h - 1, 1)], dim=-1).view(-1, 2)
        self.register_buffer("coords", coords, persistent=False)
        self.mlp = nn.Sequential(nn.Linear(2, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, d_k))

    def forward(self) -> torch.Tensor:
        return self.mlp(self.coords)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.record_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        b, nq, c = query.shape
        nk = keys.shape[1]
        q = self.q(query).view(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(keys).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(values).view(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        if self.record_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, nq, c)
        return self.proj(out)


class DecoderLayer(nn.Module):
    """Pre-norm cross-attention + feed-forward on the single pose token."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, num_heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def forward(self, query: torch.Tensor, memory: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        keys = memory + pos
        query = query + self.attn(self.norm_q(query), keys, memory)
        return query + self.ffn(self.norm_ffn(query))


class PoseDecoder(nn.Module):
    """Stack of cross-attention layers refining the pose token.

    Position encodings are added to the keys only; values stay raw.
    """

    def __init__(self, cfg):
        super().__init__()
        self.pos = PositionMLP(cfg.d_k, cfg.pos_hidden, cfg.feature_wh)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.d_k, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_k)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        pos = self.pos().unsqueeze(0)
        for layer in self.layers:
            query = layer(query, memory, pos)
        return self.norm(query.squeeze(1))
