"""Primitive formulas shared by every other module.

Everything here works on plain numpy arrays in float64. The training code
uses torch equivalents of the same formulas (see ``losses``); these versions
serve curation, evaluation and the test oracles.
"""
from __future__ import annotations

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an input makes a formula undefined (e.g. a zero-norm vector)."""


class NonFiniteError(ValueError):
    """Raised when NaN or Inf shows up where finite numbers are required."""


def as_tensor(data, shape=None, dtype=np.float64, checked: bool = True) -> np.ndarray:
    """Build a dense array, optionally reshaping and rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"shape must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"shape {shape} does not match {arr.size} elements")
        arr = arr.reshape(shape)
    if checked:
        check_finite(arr)
    return arr


def check_finite(arr, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    c = float(a @ b / (na * nb))
    return min(1.0, max(-1.0, c))


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    return normalize_rows(a) @ normalize_rows(b).T


def normalize_rows(m) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DegenerateInputError(f"row {int(bad[0])} has zero norm")
    return m / norms[:, None]


def softmax_rows(m) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    check_finite(m, "softmax input")
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def frobenius_sq_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))
