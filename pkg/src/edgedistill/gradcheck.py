"""Analytic gradients of every loss path vs. central finite differences, on toy models."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import Config, DiscConfig, PCAConfig, StudentConfig, TeacherConfig
from .losses import loss_adv_student, loss_disc, loss_gl, loss_pca
from .models import Discriminator, StudentModel, TeacherModel, set_trainable
from .projectors import GLProjector, PCAProjector
from .training import AugmentConfig, augment_batch

STEP = 1e-4
TOLERANCE = 1e-4
# Denominator floor for the relative error; below it both gradients are
# numerically zero and the comparison degrades to an absolute one.
REL_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    frozen_max_abs_grad: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.frozen_max_abs_grad == 0.0 and all(v < self.tolerance for v in self.max_rel_error.values())

    def lines(self) -> list[str]:
        out = [f"{'path':<12} {'params':>7} {'max_rel_err':>12}  status"]
        for path, err in self.max_rel_error.items():
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{path:<12} {self.checked[path]:>7} {err:>12.3e}  {status}")
        status = "ok" if self.frozen_max_abs_grad == 0.0 else "FAIL"
        out.append(f"{'frozen':<12} {'':>7} {self.frozen_max_abs_grad:>12.3e}  {status}")
        return out


def toy_config(seed: int = 0) -> Config:
    cfg = Config(
        embed_dim=8,
        image_size=8,
        trainable_suffix=4,
        gl_projector=True,
        group_count=2,
        seed=seed,
        teacher=TeacherConfig(patch=4, depth=1, heads=2, dim=4, seed=seed + 7),
        student=StudentConfig(stages=(2, 2, 1), widths=(2, 3, 4), tap_stage=1, head_hidden=4),
        pca=PCAConfig(dim=2),
        disc=DiscConfig(hidden=4),
    )
    return cfg.validate()


def numeric_grad(loss_fn, params: list[torch.Tensor], step: float = STEP) -> list[torch.Tensor]:
    """Central differences, one scalar entry at a time."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def analytic_grad(loss_fn, params: list[torch.Tensor]) -> list[torch.Tensor]:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def max_relative_error(a: list[torch.Tensor], n: list[torch.Tensor], floor: float = REL_FLOOR) -> float:
    worst = 0.0
    for ga, gn in zip(a, n):
        denom = torch.maximum(torch.maximum(ga.abs(), gn.abs()), torch.full_like(ga, floor))
        if ga.numel():
            worst = max(worst, float(((ga - gn).abs() / denom).max()))
    return worst


def gradcheck(seed: int = 0) -> GradcheckReport:
    torch.manual_seed(seed)
    cfg = toy_config(seed)
    teacher = TeacherModel(cfg)
    student = set_trainable(StudentModel(cfg), cfg.trainable_suffix)
    pca = PCAProjector(student.tap_channels, cfg.query_dim, cfg.head_dim, cfg.n_tokens, seed=seed + 1)
    gl = GLProjector(student.pooled_dim, cfg.embed_dim, cfg.group_count, seed=seed + 2)
    disc = Discriminator(cfg.embed_dim, cfg.disc.hidden, cfg.disc.normalize, seed=seed + 3)
    gen = torch.Generator().manual_seed(seed + 11)
    images = torch.rand(2, cfg.channels, cfg.image_size, cfg.image_size, generator=gen, dtype=torch.float64)
    views = augment_batch(images, AugmentConfig(views=2, seed=seed), step_index=0)
    with torch.no_grad():
        h_t, attn_t = teacher(images)

    trainable = [p for p in student.parameters() if p.requires_grad]
    frozen = [p for p in student.parameters() if not p.requires_grad]

    def pca_loss():
        return loss_pca(attn_t, pca(student.features(images)[0]))

    def gl_loss():
        _, pooled = student.features(images)
        emb = student.embed_pooled(pooled)
        return 0.5 * (loss_gl(h_t, emb) + loss_gl(h_t, gl(pooled)))

    def disc_loss():
        with torch.no_grad():
            fake = student.embed(views)
        return loss_disc(disc(h_t), disc(fake))

    def adv_loss():
        return loss_adv_student(disc(student.embed(views)))

    paths = {
        "pca": (pca_loss, trainable + list(pca.parameters())),
        "gl": (gl_loss, trainable + list(gl.parameters())),
        "disc": (disc_loss, list(disc.parameters())),
        "adv_student": (adv_loss, trainable),
    }
    report = GradcheckReport()
    for name, (fn, params) in paths.items():
        a = analytic_grad(fn, params)
        n = numeric_grad(fn, params)
        report.max_rel_error[name] = max_relative_error(a, n)
        report.checked[name] = sum(p.numel() for p in params)

    # Frozen parameters must come out of a real backward pass with no gradient.
    for p in student.parameters():
        p.grad = None
    total = pca_loss() + gl_loss() + adv_loss()
    total.backward()
    for p in frozen:
        if p.grad is not None:
            report.frozen_max_abs_grad = max(report.frozen_max_abs_grad, float(p.grad.abs().max()))
    report.checked["frozen"] = sum(p.numel() for p in frozen)
    return report
