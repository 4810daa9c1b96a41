"""Compare plain gradient descent, momentum and Adam on the desk-scale problem.

Prints the held-out cosine reached by each optimizer after the same number of steps.
"""
import argparse

import torch

from edgedistill.config import Config
from edgedistill.data import synthetic_images
from edgedistill.training import Distiller, distill, mean_cosine

SETTINGS = {
    "gd": dict(optimizer="sgd", momentum=0.0, lr_student=0.01, lr_disc=0.01),
    "momentum": dict(optimizer="sgd", momentum=0.9, lr_student=0.002, lr_disc=0.01),
    "adam": dict(optimizer="adam", lr_student=1e-3, lr_disc=1e-3),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--only", choices=sorted(SETTINGS))
    args = ap.parse_args()
    torch.set_num_threads(1)
    x, _ = synthetic_images(0, 512, 4)
    xh, _ = synthetic_images(1, 256, 4)
    for name, overrides in SETTINGS.items():
        if args.only and name != args.only:
            continue
        cfg = Config().with_overrides(precision="fp32", steps=args.steps, **overrides)
        d = Distiller.build(cfg, dtype=cfg.torch_dtype)
        student, history = distill(x, cfg, distiller=d)
        last = history.losses[-1]
        print(f"{name:<9} steps={args.steps} gl={last.gl:.4f} pca={last.pca:.4f} "
              f"held_cos={mean_cosine(student, d.teacher, xh):.4f}", flush=True)


if __name__ == "__main__":
    main()
