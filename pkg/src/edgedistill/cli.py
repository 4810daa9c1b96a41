"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numeric failure. Every failure prints one line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import Config, ConfigError
from .container import ContainerError, load_container, save_container
from .curation import EmbeddingSet, curate
from .data import DataFormatError, generate_synthetic, load_images, read_image, read_labels
from .deployment import (
    TRAINING_ONLY_PREFIXES,
    config_from_metadata,
    export_student,
    quantize_weights,
    save_checkpoint,
    student_from_container,
)
from .gradcheck import gradcheck
from .labeling import (
    StoreFormatError,
    evaluate_zero_shot,
    format_vector_line,
    label_image,
    load_store,
    queries_from_exemplars,
    read_vectors,
    save_store,
    write_report,
    write_roc_plots,
    write_vectors,
)
from .models import TeacherModel
from .numerics import DegenerateInputError, NonFiniteError
from .training import Distiller, NumericFailure, distill

log = logging.getLogger("edgedistill")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers


def load_config(args) -> Config:
    cfg = Config.from_file(args.config) if getattr(args, "config", None) else Config()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.validate()


def load_model(source: str, cfg: Config | None = None):
    """``teacher`` builds the frozen teacher from config; anything else is a container path."""
    if source == "teacher":
        cfg = cfg or Config()
        teacher = TeacherModel(cfg, dtype=cfg.torch_dtype)
        return lambda x: teacher(x)[0], cfg
    c = load_container(source)
    if any(n.startswith(TRAINING_ONLY_PREFIXES) for n in c.tensors):
        raise DataFormatError(f"{source}: this is a training checkpoint; run export first")
    model_cfg = config_from_metadata(c.metadata)
    student = student_from_container(c, dtype=model_cfg.torch_dtype)
    return student.embed, model_cfg


def embed_images(embed_fn, images: np.ndarray, cfg: Config, batch: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.as_tensor(images[i : i + batch], dtype=cfg.torch_dtype)
            out.append(embed_fn(x).double().numpy())
    return np.concatenate(out) if out else np.empty((0, cfg.embed_dim))


def labeled_images(data_dir, labels_path):
    labels = read_labels(labels_path)
    names, images = load_images(data_dir, sorted(labels))
    return names, images, [labels[n] for n in names]


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    files = generate_synthetic(args.seed, args.n, args.classes, args.out, args.size, args.noise)
    print(f"wrote {len(files)} images and labels.csv to {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = load_config(args)
    torch.manual_seed(cfg.seed)
    _, images = load_images(args.data)
    d = Distiller.build(cfg, dtype=cfg.torch_dtype)
    student, history = distill(images, cfg, distiller=d)
    save_container(save_checkpoint(student, d.pca, d.gl, d.disc), args.out)
    if args.history:
        with open(args.history, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "pca", "gl", "adv_student", "disc", "total", "disc_acc"])
            for row in history.rows():
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
    if len(history):
        last = history.losses[-1]
        print(f"steps={len(history)} total={last.total:.6f} pca={last.pca:.6f} gl={last.gl:.6f}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_container(args.ckpt)
    cfg = config_from_metadata(ckpt.metadata)
    student = student_from_container(ckpt, dtype=torch.float64)
    container = export_student(student)
    if args.quantize:
        if not args.calib:
            raise UsageError("--quantize int16 needs --calib DIR")
        _, calib = load_images(args.calib)
        container, report = quantize_weights(container, calib, cfg.quant.percentiles)
        for line in report.lines():
            print(line)
    n = save_container(container, args.out)
    print(f"wrote {n} bytes to {args.out}")
    return EXIT_OK


def cmd_curate(args) -> int:
    _, ids, vectors = read_vectors(args.embeddings)
    seeds = EmbeddingSet(vectors, ids)
    pool = None
    if args.pool:
        _, pool_ids, pool_vectors = read_vectors(args.pool)
        pool = EmbeddingSet(pool_vectors, pool_ids)
    kept, retrieved, groups = curate(seeds, pool, args.dedup_tau, args.retrieve_k, args.kmeans_k,
                                     seed=args.seed)
    rows = [(seeds.ids[i], "seed") for i in kept] + [(pool.ids[j], "pool") for j in retrieved]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "source", "group"])
        for (ident, source), g in zip(rows, groups.assignment):
            w.writerow([ident, source, int(g)])
    print(f"kept {len(kept)}/{seeds.n} seeds, retrieved {len(retrieved)}, "
          f"{groups.centroids.shape[0]} groups, inertia {groups.inertia:.6f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    embed_fn, cfg = load_model(args.model, load_config(args) if args.model == "teacher" else None)
    if args.image:
        names, images = [Path(args.image).name], read_image(args.image)[None]
    elif args.data:
        names, images = load_images(args.data)
    else:
        raise UsageError("embed needs --image F or --data DIR")
    emb = embed_images(embed_fn, images, cfg)
    if args.out:
        write_vectors(args.out, names, emb)
    else:
        print(f"dim={emb.shape[1]}")
        for name, e in zip(names, emb):
            print(format_vector_line(name, e))
    return EXIT_OK


def cmd_label(args) -> int:
    embed_fn, cfg = load_model(args.model)
    store = load_store(args.queries)
    emb = embed_images(embed_fn, read_image(args.image)[None], cfg)[0]
    result = label_image(emb, store, args.threshold)
    for lab in sorted(result.scores, key=lambda l: (-result.scores[l], l)):
        mark = "*" if lab in result.accepted else " "
        print(f"{mark} {lab}\t{result.scores[lab]:.6f}")
    return EXIT_OK


def cmd_queries(args) -> int:
    embed_fn, cfg = load_model(args.model, load_config(args) if args.model == "teacher" else None)
    _, images, labels = labeled_images(args.data, args.labels)
    exemplars = {}
    for c in sorted({c for labs in labels for c in labs}):
        exemplars[c] = images[[c in labs for labs in labels]]
    store = queries_from_exemplars(lambda x: embed_images(embed_fn, x, cfg), exemplars)
    save_store(store, args.out)
    print(f"wrote {len(store)} queries to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    embed_fn, cfg = load_model(args.model)
    store = load_store(args.queries)
    _, images, labels = labeled_images(args.data, args.labels)
    results = evaluate_zero_shot(embed_images(embed_fn, images, cfg), labels, store)
    write_report(args.out, results)
    for r in results:
        if r.skipped:
            print(f"warning: class {r.name} skipped ({r.n_pos} positives, {r.n_neg} negatives)",
                  file=sys.stderr)
        else:
            print(f"{r.name}\t{r.auc:.6f}")
    if args.plot:
        write_roc_plots(args.plot, results)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.seed)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgedistill", description=__doc__.splitlines()[0])
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def config_args(sp):
        # SUPPRESS keeps a global --config/--set from being reset by the subcommand defaults
        sp.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")
        sp.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override one config key")

    s = sub.add_parser("synth", help="write a seeded synthetic image set")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--noise", type=float, default=0.03)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("distill", help="train the student against the frozen teacher")
    config_args(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--history", help="write per-step losses as CSV")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("export", help="drop training-only tensors, optionally quantize")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--quantize", choices=["int16"])
    s.add_argument("--calib", help="calibration image directory")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("curate", help="dedup, retrieve neighbors and group embeddings")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--pool", help="retrieval pool in the same vector format")
    s.add_argument("--dedup-tau", type=float, default=Config().dedup_tau)
    s.add_argument("--retrieve-k", type=int, default=Config().retrieve_k)
    s.add_argument("--kmeans-k", type=int, default=Config().kmeans_k)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("embed", help="print embeddings in vector-store format")
    config_args(s)
    s.add_argument("--model", required=True, help="exported container, or 'teacher'")
    s.add_argument("--image")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("label", help="score one image against the query store")
    s.add_argument("--model", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--threshold", type=float, default=0.0)
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("queries", help="build a query store from labeled exemplar images")
    config_args(s)
    s.add_argument("--model", required=True, help="exported container, or 'teacher'")
    s.add_argument("--data", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_queries)

    s = sub.add_parser("eval", help="per-class zero-shot AUC report")
    s.add_argument("--model", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plot", help="directory for per-class ROC SVGs")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss path")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.print_config:
            print("\n".join(load_config(args).to_lines()))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(f"edgedistill: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"edgedistill: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, NonFiniteError, DegenerateInputError) as exc:
        print(f"edgedistill: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, StoreFormatError, ContainerError, OSError, ValueError) as exc:
        print(f"edgedistill: data error: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
