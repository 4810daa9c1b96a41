"""Training-only alignment bridges between the student and the teacher.

Both projectors live under the ``pca.`` / ``gl.`` name prefixes in checkpoints
and are dropped by ``export_student``.
"""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .config import ConfigError


def attention_from_qkv(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    d = q.shape[-1]
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1) @ v


class PCAProjector(nn.Module):
    """Partially cross attention: 3x3 conv Q/K/V on the student feature map.

    Tokens are the spatial positions flattened row-major. If the feature grid
    does not hold ``n_tokens`` positions, it is bilinearly resized to the
    teacher's square token grid first (only when ``resize`` is set).
    """

    def __init__(self, in_channels: int, query_dim: int, value_dim: int, n_tokens: int,
                 resize: bool = True, seed: int = 0, dtype=torch.float64):
        super().__init__()
        side = math.isqrt(n_tokens)
        if side * side != n_tokens:
            raise ConfigError(f"teacher token count {n_tokens} is not a square grid")
        self.in_channels = in_channels
        self.query_dim = query_dim
        self.n_tokens = n_tokens
        self.grid = side
        self.resize = resize
        self.q = nn.Conv2d(in_channels, query_dim, 3, padding=1)
        self.k = nn.Conv2d(in_channels, query_dim, 3, padding=1)
        self.v = nn.Conv2d(in_channels, value_dim, 3, padding=1)
        gen = torch.Generator().manual_seed(seed)
        for conv in (self.q, self.k, self.v):
            bound = 1.0 / math.sqrt(in_channels * 9)
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen))
                conv.bias.zero_()
        self.to(dtype)

    def to_grid(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.dim() == 3:
            feats = feats.unsqueeze(0)
        if feats.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {feats.shape[1]}")
        h, w = feats.shape[-2:]
        if h * w == self.n_tokens and h == w:
            return feats
        if not self.resize:
            raise ValueError(f"feature grid {h}x{w} does not match {self.n_tokens} teacher tokens")
        return F.interpolate(feats, size=(self.grid, self.grid), mode="bilinear", align_corners=False)

    def qkv(self, feats: torch.Tensor):
        x = self.to_grid(feats)

        def tokens(conv):
            return conv(x).flatten(2).transpose(1, 2)

        return tokens(self.q), tokens(self.k), tokens(self.v)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, C, H', W') -> (B, N, d_v)."""
        return attention_from_qkv(*self.qkv(feats))


class GLProjector(nn.Module):
    """Group-wise linear map: input block g feeds only output block g."""

    def __init__(self, in_dim: int, out_dim: int, groups: int, seed: int = 0, dtype=torch.float64):
        super().__init__()
        if groups <= 0 or in_dim % groups or out_dim % groups:
            raise ConfigError(f"group count {groups} must divide both {in_dim} and {out_dim}")
        self.groups = groups
        self.in_dim = in_dim
        self.out_dim = out_dim
        gi, go = in_dim // groups, out_dim // groups
        bound = 1.0 / math.sqrt(gi)
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.empty(groups, go, gi).uniform_(-bound, bound, generator=gen))
        self.bias = nn.Parameter(torch.empty(groups, go).uniform_(-bound, bound, generator=gen))
        self.to(dtype)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input channels, got {pooled.shape[-1]}")
        lead = pooled.shape[:-1]
        x = pooled.reshape(*lead, self.groups, self.in_dim // self.groups)
        out = torch.einsum("goi,...gi->...go", self.weight, x) + self.bias
        return out.reshape(*lead, self.out_dim)


def pca_project(p: PCAProjector, tap_features: torch.Tensor) -> torch.Tensor:
    """Single-map wrapper: (C, H', W') -> (N, d_v)."""
    return p(tap_features)[0]


def gl_project(g: GLProjector, pooled: torch.Tensor) -> torch.Tensor:
    return g(pooled)
