"""Desk-scale distillation run with held-out cosine and per-class AUC reporting.

    python scripts/desk_distill.py optimizer=adam lr_student=0.001 steps=1500

Any ``key=value`` argument overrides the config (see ``edgedistill --print-config``).
"""
import argparse
import time

import numpy as np
import torch

from edgedistill.config import Config
from edgedistill.data import class_names, synthetic_images
from edgedistill.labeling import evaluate_zero_shot, queries_from_exemplars
from edgedistill.training import Distiller, distill, mean_cosine

DEFAULTS = dict(optimizer="adam", lr_student=1e-3, lr_disc=1e-3, precision="fp32", steps=1500)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--noise", type=float, default=0.03)
    ap.add_argument("--every", type=int, default=250, help="report interval in steps")
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = Config().with_overrides(**DEFAULTS)
    for item in args.overrides:
        cfg.set(*item.split("=", 1))
    cfg.validate()
    x, y = synthetic_images(0, args.n, args.classes, noise=args.noise)
    xh, yh = synthetic_images(1, args.n // 2, args.classes, noise=args.noise)

    d = Distiller.build(cfg, dtype=cfg.torch_dtype)
    start = time.perf_counter()

    def report(step, bd, acc):
        if step % args.every == 0 or step == cfg.steps - 1:
            cos = mean_cosine(d.student, d.teacher, xh)
            print(f"{step:5d} {time.perf_counter() - start:6.1f}s total={bd.total:.4f} pca={bd.pca:.4f} "
                  f"gl={bd.gl:.4f} adv={bd.adv_student:.3f} disc={bd.disc:.3f} acc={acc:.2f} held_cos={cos:.4f}",
                  flush=True)

    student, _ = distill(x, cfg, distiller=d, callback=report)

    def embed(fn):
        def run(images):
            with torch.no_grad():
                return fn(torch.as_tensor(images, dtype=cfg.torch_dtype)).double().numpy()
        return run

    names = class_names(args.classes)
    teacher_fn, student_fn = embed(lambda v: d.teacher(v)[0]), embed(student.embed)
    store = queries_from_exemplars(teacher_fn, {names[c]: x[y == c] for c in range(args.classes)})
    labels = [{names[c]} for c in yh]
    print("class    teacher_auc student_auc   gap")
    for t, s in zip(evaluate_zero_shot(teacher_fn(xh), labels, store),
                    evaluate_zero_shot(student_fn(xh), labels, store)):
        print(f"{t.name:<8} {t.auc:11.4f} {s.auc:11.4f} {abs(t.auc - s.auc):6.4f}")
    print(f"held-out mean cosine {mean_cosine(student, d.teacher, xh):.4f}")


if __name__ == "__main__":
    main()
