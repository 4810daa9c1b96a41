"""Distillation losses. Batched inputs are reduced with the arithmetic mean.

Sign convention for the adversarial pair: the discriminator minimizes
``loss_disc`` (teacher embeddings are "real"), the student minimizes the
non-saturating ``-log D(student view)``.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .numerics import DegenerateInputError

EPS = 1e-7
DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class LossBreakdown:
    pca: float
    gl: float
    adv_student: float
    disc: float
    total: float
    lam: float

    def as_dict(self) -> dict:
        return asdict(self)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def loss_pca(attn_t, attn_s) -> torch.Tensor:
    """Squared Frobenius distance per attention output, averaged over a leading batch axis."""
    attn_t, attn_s = _t(attn_t), _t(attn_s)
    if attn_t.shape != attn_s.shape:
        raise ValueError(f"shape mismatch: {tuple(attn_t.shape)} vs {tuple(attn_s.shape)}")
    sq = (attn_t - attn_s).pow(2)
    if sq.dim() <= 2:
        return sq.sum()
    return sq.flatten(1).sum(dim=1).mean()


def loss_gl(h_t, h_s) -> torch.Tensor:
    """1 - cos(h_t, h_s), averaged over rows when batched."""
    h_t, h_s = _t(h_t), _t(h_s)
    if h_t.shape != h_s.shape:
        raise ValueError(f"shape mismatch: {tuple(h_t.shape)} vs {tuple(h_s.shape)}")
    nt = h_t.norm(dim=-1)
    ns = h_s.norm(dim=-1)
    if bool((nt == 0).any()) or bool((ns == 0).any()):
        raise DegenerateInputError("cosine loss on a zero-norm embedding")
    cos = (h_t * h_s).sum(dim=-1) / (nt * ns)
    return (1.0 - cos).mean()


def _clamp(p) -> torch.Tensor:
    return _t(p).clamp(EPS, 1.0 - EPS)


def loss_disc(d_real, d_fake) -> torch.Tensor:
    """-log D(real) - log(1 - D(fake)); what the discriminator minimizes."""
    d_real, d_fake = _clamp(d_real), _clamp(d_fake)
    return (-torch.log(d_real)).mean() + (-torch.log1p(-d_fake)).mean()


def loss_adv_student(d_fake) -> torch.Tensor:
    return (-torch.log(_clamp(d_fake))).mean()


def loss_total(pca, gl, adv_student, lam: float = DEFAULT_LAMBDA):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return pca + gl + lam * adv_student


def cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a, b, dim=-1, eps=0.0)
