import numpy as np
import pytest
import torch

from edgedistill.gradcheck import gradcheck, toy_config
from edgedistill.losses import loss_gl
from edgedistill.training import (
    AugmentConfig,
    Distiller,
    NumericFailure,
    augment_batch,
    augment_views,
    distill,
    linear_instance,
)


def toy_images(cfg, n=6, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).random((n, 3, cfg.image_size, cfg.image_size)))


def snapshot(*modules):
    return [[p.detach().clone() for p in m.parameters()] for m in modules]


def unchanged(before, *modules):
    return all(
        torch.equal(a, p) for snap, m in zip(before, modules) for a, p in zip(snap, m.parameters())
    )


def test_identity_augmentation():
    img = torch.rand(3, 8, 8, dtype=torch.float64)
    views = augment_views(img, AugmentConfig(views=3, crop=(1.0, 1.0), mask=(0.0, 0.0), jitter=0.0), 5)
    assert len(views) == 3
    assert all(torch.equal(v, img) for v in views)


def test_augmentation_deterministic_and_shape():
    img = torch.rand(3, 16, 16, dtype=torch.float64)
    cfg = AugmentConfig(views=2, seed=9)
    a, b = augment_views(img, cfg, 3, 7), augment_views(img, cfg, 3, 7)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert all(v.shape == img.shape for v in a)
    assert not torch.equal(a[0], augment_views(img, cfg, 4, 7)[0])
    assert augment_batch(img[None].repeat(4, 1, 1, 1), cfg, 0).shape == (8, 3, 16, 16)


@pytest.mark.parametrize("size", [8, 16, 20])
def test_mask_rectangle_size(size):
    img = torch.ones(3, size, size, dtype=torch.float64)
    cfg = AugmentConfig(views=1, crop=(1.0, 1.0), mask=(0.25, 0.25), jitter=0.0)
    (view,) = augment_views(img, cfg, 0)
    zero = (view == 0).all(dim=0)
    side = int(np.floor(0.25 * size))
    assert int(zero.sum()) == side * side
    rows, cols = torch.nonzero(zero, as_tuple=True)
    assert int(rows.max() - rows.min()) + 1 == side and int(cols.max() - cols.min()) + 1 == side


def test_augment_config_errors():
    with pytest.raises(ValueError):
        AugmentConfig(crop=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentConfig(views=0)
    with pytest.raises(ValueError):
        augment_views(torch.zeros(2, 2), AugmentConfig(), 0)


def test_alternation_isolation():
    cfg = toy_config(0)
    d = Distiller.build(cfg)
    x = toy_images(cfg)
    students = list(d.trainable_modules().values())
    h_t, attn = d.teacher(x)
    teacher_before = snapshot(d.teacher)

    # phase (a) alone: run the discriminator update and check the student side is untouched
    s_before = snapshot(*students)
    d_before = snapshot(d.disc)
    orig_step = d.opt_student.step
    d.opt_student.step = lambda *a, **k: None
    d.train_step(x, 0)
    d.opt_student.step = orig_step
    assert unchanged(s_before, *students)
    assert not unchanged(d_before, d.disc)

    # phase (b): the discriminator after (a) must survive (b) bit-identically
    after_a = {}
    orig_disc_step = d.opt_disc.step

    def disc_step(*a, **k):
        orig_disc_step(*a, **k)
        after_a["snap"] = snapshot(d.disc)

    d.opt_disc.step = disc_step
    d.train_step(x, 1)
    assert unchanged(after_a["snap"], d.disc)
    assert not unchanged(s_before, *students)
    assert unchanged(teacher_before, d.teacher)
    assert all(p.requires_grad for p in d.disc.parameters())


def test_frozen_parameters_untouched():
    cfg = toy_config(1)
    d = Distiller.build(cfg)
    frozen = [p for p in d.student.parameters() if not p.requires_grad]
    assert frozen
    before = [p.clone() for p in frozen]
    x = toy_images(cfg)
    for step in range(3):
        d.train_step(x, step)
    assert all(torch.equal(a, b) for a, b in zip(before, frozen))


def test_nonfinite_loss_aborts():
    cfg = toy_config(0)
    d = Distiller.build(cfg)
    x = toy_images(cfg)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericFailure):
        d.train_step(x, 0)


def test_convex_instance_descends():
    d, x = linear_instance(seed=0, lr=0.1)
    losses = []
    for step in range(1000):
        losses.append(d.train_step(x, step)[0].gl)
    first = losses[:100]
    assert all(b < a for a, b in zip(first, first[1:]))
    assert min(losses) <= 0.01
    assert next(i for i, l in enumerate(losses) if l <= 0.01) < 1000


def test_steps_zero_keeps_student():
    cfg = toy_config(2).with_overrides(steps=0)
    d = Distiller.build(cfg)
    before = {k: v.clone() for k, v in d.student.state_dict().items()}
    student, history = distill(toy_images(cfg), cfg, distiller=d)
    assert len(history) == 0
    assert all(torch.equal(before[k], v) for k, v in student.state_dict().items())


def test_distill_deterministic():
    cfg = toy_config(3).with_overrides(steps=4, batch=4)
    x = toy_images(cfg, n=10)
    _, h1 = distill(x, cfg)
    _, h2 = distill(x, cfg)
    assert h1.rows() == h2.rows()
    assert len(h1) == 4


def test_distill_rejects_empty():
    cfg = toy_config(0)
    with pytest.raises(ValueError):
        distill(np.empty((0, 3, 8, 8)), cfg)


def test_gradcheck_report():
    report = gradcheck(0)
    assert report.passed
    assert set(report.checked) >= {"pca", "gl", "disc", "adv_student"}
    assert all(err < 1e-4 for err in report.max_rel_error.values())
    assert report.frozen_max_abs_grad == 0.0
