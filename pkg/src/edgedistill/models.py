"""The frozen toy transformer teacher, the conv student and the discriminator."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .config import Config

PROB_EPS = 1e-7
# Fixed pixel normalization applied by both networks to [0, 1] images.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=gen))
        if layer.bias is not None:
            layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=gen))


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    # SiLU-friendly gain so activations keep their scale through the stack.
    std = math.sqrt(2.0 / fan_in)
    with torch.no_grad():
        conv.weight.copy_(torch.empty_like(conv.weight).normal_(0.0, std, generator=gen))
        if conv.bias is not None:
            conv.bias.zero_()


def _check_image(image: torch.Tensor, cfg: Config) -> torch.Tensor:
    if image.dim() == 3:
        image = image.unsqueeze(0)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if image.dim() != 4 or tuple(image.shape[1:]) != expected:
        raise ValueError(f"expected image of shape {expected} (optionally batched), got {tuple(image.shape)}")
    return (image - PIXEL_MEAN) / PIXEL_STD


class TeacherBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Per-head softmax(QK^T/sqrt(d)) V, shape (B, heads, tokens, head_dim)."""
        b, n, dim = x.shape
        d = dim // self.heads
        qkv = self.qkv(self.norm1(x)).reshape(b, n, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        return weights @ v

    def forward(self, x):
        b, n, dim = x.shape
        heads_out = self.attention(x)
        x = x + self.proj(heads_out.transpose(1, 2).reshape(b, n, dim))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, heads_out


class TeacherModel(nn.Module):
    """Seeded random-weight ViT stand-in. All parameters are frozen."""

    def __init__(self, cfg: Config, dtype=torch.float64):
        super().__init__()
        t = cfg.teacher
        self.cfg = cfg
        self.patch = t.patch
        self.n_tokens = cfg.n_tokens
        self.pool = t.pool
        gen = torch.Generator().manual_seed(t.seed)
        self.patch_embed = nn.Linear(cfg.channels * t.patch * t.patch, t.dim)
        extra = 1 if t.pool == "cls" else 0
        self.cls_token = nn.Parameter(torch.zeros(1, 1, t.dim)) if extra else None
        self.pos = nn.Parameter(torch.zeros(1, self.n_tokens + extra, t.dim))
        self.blocks = nn.ModuleList(TeacherBlock(t.dim, t.heads, t.mlp_ratio) for _ in range(t.depth))
        self.norm = nn.LayerNorm(t.dim)
        self.out = nn.Linear(t.dim, cfg.embed_dim, bias=False)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m, gen)
        with torch.no_grad():
            self.pos.normal_(0.0, 0.02, generator=gen)
            if self.cls_token is not None:
                self.cls_token.normal_(0.0, 0.02, generator=gen)
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def patchify(self, image: torch.Tensor) -> torch.Tensor:
        b, c, h, w = image.shape
        p = self.patch
        x = image.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def forward(self, image: torch.Tensor):
        """Return (embedding (B, d_e), attention (B, N, d_v)) for a batch."""
        image = _check_image(image, self.cfg)
        x = self.patch_embed(self.patchify(image))
        if self.pool == "cls":
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self.pos
        heads_out = None
        for block in self.blocks:
            x, heads_out = block(x)
        attn = heads_out.mean(dim=1)
        x = self.norm(x)
        if self.pool == "cls":
            pooled, attn = x[:, 0], attn[:, 1:]
        else:
            pooled = x.mean(dim=1)
        return self.out(pooled), attn


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1)

    def forward(self, x):
        return F.silu(self.conv2(F.silu(self.conv1(x))))


class StudentModel(nn.Module):
    """Conv backbone plus a 3-layer MLP head mapping pooled channels to d_e."""

    HEAD_DEPTH = 3

    def __init__(self, cfg: Config, seed: int | None = None, dtype=torch.float64):
        super().__init__()
        s = cfg.student
        self.cfg = cfg
        self.tap_stage = s.tap_stage
        gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
        cin = cfg.channels
        blocks = []
        for stride, width in zip(s.stages, s.widths):
            blocks.append(ConvBlock(cin, width, stride))
            cin = width
        self.backbone = nn.ModuleList(blocks)
        self.head = nn.ModuleList([
            nn.Linear(cin, s.head_hidden),
            nn.Linear(s.head_hidden, s.head_hidden),
            nn.Linear(s.head_hidden, cfg.embed_dim),
        ])
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                _init_conv(m, gen)
            elif isinstance(m, nn.Linear):
                _init_linear(m, gen)
        self.to(dtype)

    @property
    def pooled_dim(self) -> int:
        return self.cfg.student.widths[-1]

    @property
    def tap_channels(self) -> int:
        return self.cfg.student.widths[self.tap_stage]

    def layers(self) -> list[nn.Module]:
        return [*self.backbone, *self.head]

    def features(self, image: torch.Tensor):
        """Return (tap feature map, pooled channel vector)."""
        x = _check_image(image, self.cfg)
        tap = None
        for i, block in enumerate(self.backbone):
            x = block(x)
            if i == self.tap_stage:
                tap = x
        return tap, x.mean(dim=(2, 3))

    def embed_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        h = pooled
        for i, layer in enumerate(self.head):
            h = layer(h)
            if i < len(self.head) - 1:
                h = F.silu(h)
        return h

    def forward(self, image: torch.Tensor):
        tap, pooled = self.features(image)
        return tap, self.embed_pooled(pooled)

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        return self.forward(image)[1]


class Discriminator(nn.Module):
    """Three fully connected layers ending in a sigmoid."""

    def __init__(self, embed_dim: int, hidden: int = 128, normalize: bool = True,
                 seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.embed_dim = embed_dim
        self.normalize = normalize
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 1)
        gen = torch.Generator().manual_seed(seed)
        for m in (self.fc1, self.fc2, self.fc3):
            _init_linear(m, gen)
        self.to(dtype)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.embed_dim:
            raise ValueError(f"expected embedding length {self.embed_dim}, got {e.shape[-1]}")
        if self.normalize:
            e = F.normalize(e, dim=-1)
        h = F.silu(self.fc1(e))
        h = F.silu(self.fc2(h))
        return torch.sigmoid(self.fc3(h)).squeeze(-1).clamp(PROB_EPS, 1.0 - PROB_EPS)


def teacher_forward(teacher: TeacherModel, image: torch.Tensor):
    """Single-image convenience wrapper: (embedding (d_e,), attention (N, d_v))."""
    emb, attn = teacher(image)
    return emb[0], attn[0]


def student_forward(student: StudentModel, image: torch.Tensor):
    """Single-image convenience wrapper: (tap features (C, H', W'), embedding (d_e,))."""
    tap, emb = student(image)
    return tap[0], emb[0]


def discriminator_forward(disc: Discriminator, e: torch.Tensor) -> float:
    if e.dim() != 1:
        raise ValueError("discriminator_forward takes a single embedding vector")
    return float(disc(e).detach())


def set_trainable(student: StudentModel, trainable_suffix_count: int) -> StudentModel:
    """Mark only the last ``trainable_suffix_count`` layers (backbone blocks, then head) trainable."""
    layers = student.layers()
    if not 0 <= trainable_suffix_count <= len(layers):
        raise ValueError(f"trainable count must be in [0, {len(layers)}], got {trainable_suffix_count}")
    cut = len(layers) - trainable_suffix_count
    for i, layer in enumerate(layers):
        for p in layer.parameters():
            p.requires_grad_(i >= cut)
    return student


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
