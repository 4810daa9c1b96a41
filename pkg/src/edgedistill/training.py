"""Multi-view augmentation, the alternating distillation loop and gradient checking."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .config import Config
from .deployment import export_student, save_checkpoint  # noqa: F401  (re-exported)
from .losses import LossBreakdown, loss_adv_student, loss_disc, loss_gl, loss_pca, loss_total
from .models import Discriminator, StudentModel, TeacherModel, set_trainable
from .projectors import GLProjector, PCAProjector

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    views: int = 2
    crop: tuple[float, float] = (0.6, 1.0)
    mask: tuple[float, float] = (0.0, 0.3)
    jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.views < 1:
            raise ValueError("views must be >= 1")
        lo, hi = self.crop
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop fractions must satisfy 0 < lo <= hi <= 1, got {self.crop}")
        lo, hi = self.mask
        if not (0 <= lo <= hi <= 1):
            raise ValueError(f"mask fractions must satisfy 0 <= lo <= hi <= 1, got {self.mask}")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    @classmethod
    def from_config(cls, cfg: Config) -> "AugmentConfig":
        a = cfg.aug
        return cls(cfg.views, (a.crop_min, a.crop_max), (a.mask_min, a.mask_max), a.jitter, cfg.seed)


def _augment_one(image: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    c, h, w = image.shape
    out = image
    frac = rng.uniform(*cfg.crop)
    ch, cw = int(round(frac * h)), int(round(frac * w))
    if ch < 1 or cw < 1:
        raise ValueError(f"crop fraction {frac:.3g} gives a zero-area crop")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    if (ch, cw) != (h, w):
        out = out[:, top : top + ch, left : left + cw]
        out = F.interpolate(out[None], size=(h, w), mode="bilinear", align_corners=False)[0]
    gain = rng.uniform(-cfg.jitter, cfg.jitter, size=c)
    shift = rng.uniform(-cfg.jitter, cfg.jitter, size=c)
    if cfg.jitter > 0:
        gain_t = torch.as_tensor(1.0 + gain, dtype=out.dtype)[:, None, None]
        shift_t = torch.as_tensor(shift, dtype=out.dtype)[:, None, None]
        out = ((out - 0.5) * gain_t + 0.5 + shift_t).clamp(0.0, 1.0)
    m = rng.uniform(*cfg.mask)
    mh, mw = int(math.floor(m * h)), int(math.floor(m * w))
    top = int(rng.integers(0, h - mh + 1))
    left = int(rng.integers(0, w - mw + 1))
    if mh > 0 and mw > 0:
        out = out.clone() if out is image else out
        out[:, top : top + mh, left : left + mw] = 0.0
    return out


def augment_views(image, cfg: AugmentConfig, step_index: int, image_index: int = 0) -> list[torch.Tensor]:
    """V augmented copies of one (C, H, W) image: crop+resize, color jitter, cutout.

    Each view draws from its own generator keyed on (seed, step, image, view).
    """
    image = torch.as_tensor(image)
    if image.dim() != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(image.shape)}")
    views = []
    for v in range(cfg.views):
        rng = np.random.default_rng([cfg.seed, step_index, image_index, v])
        views.append(_augment_one(image, cfg, rng))
    return views


def augment_batch(images: torch.Tensor, cfg: AugmentConfig, step_index: int,
                  indices=None) -> torch.Tensor:
    """Views of a batch stacked view-major within each image: (B * V, C, H, W)."""
    if indices is None:
        indices = range(images.shape[0])
    out = []
    for img, idx in zip(images, indices):
        out.extend(augment_views(img, cfg, step_index, int(idx)))
    return torch.stack(out)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    losses: list[LossBreakdown] = field(default_factory=list)
    disc_accuracy: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)

    def rows(self) -> list[tuple]:
        return [
            (i, b.pca, b.gl, b.adv_student, b.disc, b.total, acc)
            for i, (b, acc) in enumerate(zip(self.losses, self.disc_accuracy))
        ]


def make_optimizer(params, lr: float, cfg: Config) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)


class Distiller:
    """Holds the models and optimizers for alternating teacher-student training.

    ``teacher(x)`` must return ``(embedding, attention or None)`` and
    ``student(x)`` must return ``(tap features or None, embedding)``.
    """

    def __init__(self, teacher: nn.Module, student: nn.Module, disc: Discriminator,
                 cfg: Config, pca: PCAProjector | None = None, gl: GLProjector | None = None,
                 aug: AugmentConfig | None = None):
        self.teacher = teacher
        self.student = student
        self.disc = disc
        self.pca = pca
        self.gl = gl
        self.cfg = cfg
        self.aug = aug
        self.student_params = [p for p in student.parameters() if p.requires_grad]
        for m in (pca, gl):
            if m is not None:
                self.student_params += list(m.parameters())
        self.opt_student = make_optimizer(self.student_params, cfg.lr_student, cfg)
        self.opt_disc = make_optimizer(disc.parameters(), cfg.lr_disc, cfg)

    @classmethod
    def build(cls, cfg: Config, aug: AugmentConfig | None = None, dtype=torch.float64) -> "Distiller":
        teacher = TeacherModel(cfg, dtype=dtype)
        student = set_trainable(StudentModel(cfg, dtype=dtype), cfg.trainable_suffix)
        pca = PCAProjector(student.tap_channels, cfg.query_dim, cfg.head_dim, cfg.n_tokens,
                           resize=cfg.pca.resize, seed=cfg.seed + 1, dtype=dtype)
        gl = None
        if cfg.gl_projector:
            gl = GLProjector(student.pooled_dim, cfg.embed_dim, cfg.group_count, seed=cfg.seed + 2, dtype=dtype)
        disc = Discriminator(cfg.embed_dim, cfg.disc.hidden, cfg.disc.normalize, seed=cfg.seed + 3, dtype=dtype)
        return cls(teacher, student, disc, cfg, pca=pca, gl=gl,
                   aug=aug if aug is not None else AugmentConfig.from_config(cfg))

    def trainable_modules(self) -> dict[str, nn.Module]:
        mods = {"student": self.student}
        if self.pca is not None:
            mods["pca"] = self.pca
        if self.gl is not None:
            mods["gl"] = self.gl
        return mods

    def views(self, batch: torch.Tensor, step: int, indices=None) -> torch.Tensor:
        if self.aug is None:
            return batch
        return augment_batch(batch, self.aug, step, indices)

    def _gl_loss(self, h_t, emb, pooled):
        loss = loss_gl(h_t, emb)
        if self.gl is not None and pooled is not None:
            loss = 0.5 * (loss + loss_gl(h_t, self.gl(pooled)))
        return loss

    def train_step(self, batch: torch.Tensor, step: int = 0, indices=None,
                   teacher_out=None) -> tuple[LossBreakdown, float]:
        """(a) discriminator update with the student fixed, then (b) student update with D fixed."""
        cfg = self.cfg
        if teacher_out is None:
            with torch.no_grad():
                teacher_out = self.teacher(batch)
        h_t, attn_t = teacher_out
        views = self.views(batch, step, indices)

        # (a) discriminator
        with torch.no_grad():
            fake = self.student(views)[1]
        for _ in range(cfg.disc_steps):
            d_real = self.disc(h_t)
            d_fake = self.disc(fake)
            l_disc = loss_disc(d_real, d_fake)
            if not torch.isfinite(l_disc):
                raise NumericFailure("non-finite discriminator loss", step)
            self.opt_disc.zero_grad(set_to_none=True)
            l_disc.backward()
            self.opt_disc.step()
        acc = 0.5 * (float((d_real > 0.5).double().mean()) + float((d_fake < 0.5).double().mean()))

        # (b) student + projectors
        for p in self.disc.parameters():
            p.requires_grad_(False)
        try:
            if self.pca is not None or self.gl is not None:
                tap, pooled = self.student.features(batch)
                emb = self.student.embed_pooled(pooled)
            else:
                tap, emb = self.student(batch)
                pooled = None
            zero = emb.new_zeros(())
            l_pca = loss_pca(attn_t, self.pca(tap)) if self.pca is not None else zero
            emb_views = self.student(views)[1]
            l_gl = self._gl_loss(h_t, emb, pooled)
            if cfg.gl_on_views and self.aug is not None:
                reps = emb_views.shape[0] // emb.shape[0]
                l_gl = (l_gl + reps * loss_gl(h_t.repeat_interleave(reps, dim=0), emb_views)) / (1 + reps)
            l_adv = loss_adv_student(self.disc(emb_views))
            total = loss_total(l_pca, l_gl, l_adv, cfg.lam)
            if not torch.isfinite(total):
                raise NumericFailure("non-finite student loss", step)
            self.opt_student.zero_grad(set_to_none=True)
            total.backward()
            self.opt_student.step()
        finally:
            for p in self.disc.parameters():
                p.requires_grad_(True)
        breakdown = LossBreakdown(*(float(v.detach()) for v in (l_pca, l_gl, l_adv, l_disc, total)), cfg.lam)
        return breakdown, acc


def train_step(distiller: Distiller, batch: torch.Tensor, step: int = 0) -> LossBreakdown:
    return distiller.train_step(batch, step)[0]


def batch_order(n: int, batch: int, steps: int, seed: int):
    """Yield index arrays for ``steps`` batches drawn from seeded per-epoch permutations."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        idx = []
        while len(idx) < min(batch, n):
            if pos == n:
                perm = rng.permutation(n)
                pos = 0
            take = min(batch - len(idx), n - pos)
            idx.extend(perm[pos : pos + take])
            pos += take
        yield np.asarray(idx)


def distill(images, cfg: Config, aug: AugmentConfig | None = None, distiller: Distiller | None = None,
            callback=None) -> tuple[StudentModel, TrainHistory]:
    """Run ``cfg.steps`` alternating steps over seeded shuffled batches of ``images``.

    Teacher outputs are computed once up front (the teacher is frozen).
    """
    images = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    if images.dim() != 4 or images.shape[0] == 0:
        raise ValueError("distill needs a nonempty (N, C, H, W) image batch")
    d = distiller if distiller is not None else Distiller.build(cfg, aug)
    images = images.to(next(d.student.parameters()).dtype)
    with torch.no_grad():
        h_all, attn_all = d.teacher(images)
    history = TrainHistory()
    for step, idx in enumerate(batch_order(images.shape[0], cfg.batch, cfg.steps, cfg.seed)):
        t_idx = torch.as_tensor(idx)
        bd, acc = d.train_step(images[t_idx], step, idx, (h_all[t_idx], attn_all[t_idx]))
        history.losses.append(bd)
        history.disc_accuracy.append(acc)
        if callback is not None:
            callback(step, bd, acc)
        elif step % 100 == 0:
            log.info("step %d total=%.5f pca=%.5f gl=%.5f adv=%.4f disc=%.4f acc=%.2f",
                     step, bd.total, bd.pca, bd.gl, bd.adv_student, bd.disc, acc)
    d.student.eval()
    return d.student, history


def mean_cosine(student: StudentModel, teacher: TeacherModel, images) -> float:
    images = torch.as_tensor(np.asarray(images), dtype=next(student.parameters()).dtype)
    with torch.no_grad():
        s = student.embed(images)
        t = teacher(images.to(next(teacher.parameters()).dtype))[0].to(s.dtype)
    return float(F.cosine_similarity(s, t, dim=-1).mean())


# --------------------------------------------------------------------------
# linear instance: cosine loss between a linear teacher and a linear student


class LinearTeacher(nn.Module):
    def __init__(self, in_dim: int, embed_dim: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(embed_dim, in_dim, generator=gen, dtype=torch.float64) / math.sqrt(in_dim),
                                   requires_grad=False)

    def forward(self, x):
        return x @ self.weight.T, None


class LinearStudent(nn.Module):
    def __init__(self, in_dim: int, embed_dim: int, seed: int = 1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(embed_dim, in_dim, generator=gen, dtype=torch.float64) / math.sqrt(in_dim))

    def forward(self, x):
        return None, x @ self.weight.T

    def embed(self, x):
        return self.forward(x)[1]


def linear_instance(seed: int = 0, n: int = 64, in_dim: int = 8, embed_dim: int = 8, lr: float = 0.1):
    """(distiller, inputs) for the linear teacher / linear student problem with lambda = 0."""
    cfg = Config().with_overrides(lam=0.0, lr_student=lr, lr_disc=0.01, momentum=0.0,
                                  embed_dim=embed_dim, seed=seed)
    gen = torch.Generator().manual_seed(seed + 100)
    x = torch.randn(n, in_dim, generator=gen, dtype=torch.float64)
    teacher = LinearTeacher(in_dim, embed_dim, seed)
    student = LinearStudent(in_dim, embed_dim, seed + 1)
    disc = Discriminator(embed_dim, 16, seed=seed + 3)
    return Distiller(teacher, student, disc, cfg), x
