"""Zero-shot labeling against a query store, plus ROC/AUC evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DegenerateInputError, cosine_matrix, normalize_rows

log = logging.getLogger(__name__)


class StoreFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# query store


@dataclass
class QueryStore:
    dim: int
    labels: list[str] = field(default_factory=list)
    vectors: np.ndarray = None

    def __post_init__(self):
        if self.vectors is None:
            self.vectors = np.empty((0, self.dim))
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64)).reshape(-1, self.dim)
        if len(self.labels) != len(self.vectors):
            raise ValueError(f"{len(self.labels)} labels for {len(self.vectors)} vectors")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be unique")
        if len(self.vectors):
            self.vectors = normalize_rows(self.vectors)

    def __getitem__(self, label: str) -> np.ndarray:
        return self.vectors[self.labels.index(label)]

    def __len__(self) -> int:
        return len(self.labels)

    def add(self, label: str, vector) -> None:
        if label in self.labels:
            raise ValueError(f"duplicate label {label!r}")
        v = normalize_rows(np.asarray(vector, dtype=np.float64).reshape(1, self.dim))
        self.labels.append(label)
        self.vectors = np.vstack([self.vectors, v])


def format_vector_line(label: str, v) -> str:
    return label + "\t" + " ".join(repr(float(x)) for x in np.asarray(v).ravel())


def write_vectors(path, labels, vectors) -> None:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={vectors.shape[1]}\n")
        for label, v in zip(labels, vectors):
            if "\t" in label or "\n" in label:
                raise StoreFormatError(f"label {label!r} contains a tab or newline")
            fh.write(format_vector_line(label, v) + "\n")


def read_vectors(path) -> tuple[int, list[str], np.ndarray]:
    """Parse ``dim=<d>`` then ``<label>\\t<v1> ... <vd>`` lines (no normalization)."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StoreFormatError(f"{path}: {exc.strerror}") from None
    if not lines or not lines[0].startswith("dim="):
        raise StoreFormatError(f"{path}:1: expected 'dim=<d>'")
    try:
        dim = int(lines[0][4:])
    except ValueError:
        raise StoreFormatError(f"{path}:1: bad dimension {lines[0][4:]!r}") from None
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        if "\t" not in line:
            raise StoreFormatError(f"{path}:{lineno}: expected '<label>\\t<values>'")
        label, values = line.split("\t", 1)
        try:
            v = [float(x) for x in values.split()]
        except ValueError:
            raise StoreFormatError(f"{path}:{lineno}: non-numeric value") from None
        if len(v) != dim:
            raise StoreFormatError(f"{path}:{lineno}: {len(v)} values, expected {dim}")
        labels.append(label)
        rows.append(v)
    vectors = np.asarray(rows, dtype=np.float64).reshape(-1, dim)
    if not np.all(np.isfinite(vectors)):
        raise StoreFormatError(f"{path}: non-finite values")
    return dim, labels, vectors


def load_store(path) -> QueryStore:
    dim, labels, vectors = read_vectors(path)
    try:
        return QueryStore(dim, labels, vectors)
    except (ValueError, DegenerateInputError) as exc:
        raise StoreFormatError(f"{path}: {exc}") from None


def save_store(store: QueryStore, path) -> None:
    write_vectors(path, store.labels, store.vectors)


def match(e, store: QueryStore) -> dict[str, float]:
    """Cosine similarity of one embedding against every stored query."""
    e = np.asarray(e, dtype=np.float64).ravel()
    if e.size != store.dim:
        raise ValueError(f"embedding has dim {e.size}, store has dim {store.dim}")
    if not len(store):
        return {}
    sims = cosine_matrix(e[None], store.vectors)[0]
    return {label: float(np.clip(s, -1.0, 1.0)) for label, s in zip(store.labels, sims)}


@dataclass
class LabelResult:
    scores: dict[str, float]
    threshold: float

    @property
    def accepted(self) -> list[str]:
        return sorted((l for l, s in self.scores.items() if s >= self.threshold),
                      key=lambda l: -self.scores[l])


def label_image(e, store: QueryStore, threshold: float = 0.0) -> LabelResult:
    return LabelResult(match(e, store), threshold)


def queries_from_exemplars(embed_fn, exemplars: dict[str, np.ndarray]) -> QueryStore:
    """store[label] = normalized mean embedding of that label's exemplar images.

    ``embed_fn`` maps an (n, C, H, W) batch to an (n, d) array.
    """
    store = None
    for label in sorted(exemplars):
        images = np.asarray(exemplars[label])
        if images.shape[0] == 0:
            raise ValueError(f"label {label!r} has no exemplars")
        emb = np.asarray(embed_fn(images), dtype=np.float64)
        if store is None:
            store = QueryStore(emb.shape[1])
        store.add(label, emb.mean(axis=0))
    if store is None:
        raise ValueError("no labels given")
    return store


def masks_to_image_labels(mask, class_ids) -> set[int]:
    """Every class present anywhere in a segmentation mask labels the whole image."""
    present = {int(v) for v in np.unique(np.asarray(mask))}
    return present & {int(c) for c in class_ids}


# --------------------------------------------------------------------------
# ROC / AUC


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    if labels.all() or not labels.any():
        raise ValueError("both classes must be present for ROC/AUC")
    return scores, labels


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points for thresholds at each distinct score, descending; ties share a step."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    points = [(0.0, 0.0)]
    points += [(float(f) / n_neg, float(t) / n_pos) for t, f in zip(tp, fp)]
    return points


def auc(scores, labels) -> float:
    pts = roc_curve(scores, labels)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ClassResult:
    name: str
    auc: float
    n_pos: int
    n_neg: int
    roc: list[tuple[float, float]] | None = None

    @property
    def skipped(self) -> bool:
        return math.isnan(self.auc)


def evaluate_zero_shot(embeddings, image_labels: list[set[str]], store: QueryStore) -> list[ClassResult]:
    """Per-class AUC of cosine(image embedding, store[class]) against image-level labels.

    Classes whose labels are all positive or all negative are kept in the
    table with ``auc = nan`` and logged as skipped.
    """
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if len(image_labels) != embeddings.shape[0]:
        raise ValueError(f"{len(image_labels)} label sets for {embeddings.shape[0]} images")
    sims = cosine_matrix(embeddings, store.vectors)
    results = []
    for name in sorted(store.labels):
        y = np.array([name in labs for labs in image_labels])
        n_pos, n_neg = int(y.sum()), int((~y).sum())
        if n_pos == 0 or n_neg == 0:
            log.warning("skipping class %s: %d positives, %d negatives", name, n_pos, n_neg)
            results.append(ClassResult(name, float("nan"), n_pos, n_neg))
            continue
        scores = sims[:, store.labels.index(name)]
        results.append(ClassResult(name, auc(scores, y), n_pos, n_neg, roc_curve(scores, y)))
    return results


def write_report(path, results: list[ClassResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "auc", "n_pos", "n_neg"])
        for r in results:
            w.writerow([r.name, "nan" if r.skipped else f"{r.auc:.6f}", r.n_pos, r.n_neg])


def roc_svg(points, title: str, size: int = 320) -> str:
    pad = 40
    span = size - 2 * pad

    def xy(p):
        return f"{pad + p[0] * span:.2f},{size - pad - p[1] * span:.2f}"

    poly = " ".join(xy(p) for p in points)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="gray" stroke-dasharray="4"/>\n'
        f'<polyline points="{poly}" fill="none" stroke="blue" stroke-width="2"/>\n'
        f'<text x="{size / 2}" y="{pad / 2}" text-anchor="middle" font-size="14">{title}</text>\n'
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">FPR</text>\n'
        f'<text x="12" y="{size / 2}" font-size="12" transform="rotate(-90 12 {size / 2})">TPR</text>\n'
        "</svg>\n"
    )


def write_roc_plots(directory, results: list[ClassResult]) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r in results:
        if r.roc is None:
            continue
        path = out / f"roc_{r.name}.svg"
        path.write_text(roc_svg(r.roc, f"{r.name} (AUC {r.auc:.4f})"), encoding="utf-8")
        written.append(path)
    return written
