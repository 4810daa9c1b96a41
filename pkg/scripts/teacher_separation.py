"""How well does the frozen teacher separate the synthetic classes by cosine to class-mean queries?

    python scripts/teacher_separation.py teacher.patch=8 teacher.patch=4 teacher.pool=cls

Each argument is evaluated as a separate variant of the default config.
"""
import sys

import numpy as np
import torch

from edgedistill.config import Config
from edgedistill.data import class_names, synthetic_images
from edgedistill.labeling import evaluate_zero_shot, queries_from_exemplars
from edgedistill.models import TeacherModel


def separation(cfg: Config, x, y, xh, yh):
    teacher = TeacherModel(cfg)

    def embed(images):
        with torch.no_grad():
            return teacher(torch.from_numpy(images))[0].numpy()

    names = class_names(int(y.max()) + 1)
    store = queries_from_exemplars(embed, {n: x[y == c] for c, n in enumerate(names)})
    e = embed(xh)
    unit = e / np.linalg.norm(e, axis=1, keepdims=True)
    mean = unit.mean(axis=0)
    spread = float(np.mean(unit @ mean / np.linalg.norm(mean)))
    aucs = [r.auc for r in evaluate_zero_shot(e, [{names[c]} for c in yh], store)]
    return aucs, spread


def main(argv):
    x, y = synthetic_images(0, 512, 4)
    xh, yh = synthetic_images(1, 256, 4)
    for variant in argv or [""]:
        cfg = Config()
        if variant:
            cfg.set(*variant.split("=", 1))
        aucs, spread = separation(cfg.validate(), x, y, xh, yh)
        print(f"{variant or 'default':<20} aucs={' '.join(f'{a:.3f}' for a in aucs)} "
              f"min={min(aucs):.3f} cos_to_mean={spread:.3f}")


if __name__ == "__main__":
    main(sys.argv[1:])
