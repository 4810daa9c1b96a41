"""Dataset curation: leader-threshold dedup, cosine neighbor retrieval, k-means grouping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DegenerateInputError, check_finite, normalize_rows


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    ids: list[str] | None = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.ndim != 2:
            raise ValueError("embedding set must be a 2-D matrix")
        check_finite(self.vectors, "embedding set")
        if self.ids is not None:
            self.ids = list(self.ids)
            if len(self.ids) != len(self.vectors):
                raise ValueError(f"{len(self.ids)} ids for {len(self.vectors)} rows")
            if len(set(self.ids)) != len(self.ids):
                raise ValueError("identifiers must be unique")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, index) -> "EmbeddingSet":
        index = list(index)
        ids = None if self.ids is None else [self.ids[i] for i in index]
        return EmbeddingSet(self.vectors[index], ids)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    try:
        return normalize_rows(m)
    except DegenerateInputError as exc:
        raise DegenerateInputError(f"zero-norm embedding: {exc}") from None


def dedup(s: EmbeddingSet, tau: float = 0.95) -> list[int]:
    """Greedy leader pass in input order.

    Row i is kept iff its cosine similarity to every previously kept row is
    below ``tau``. The result depends on input order by design.
    """
    if not 0 < tau <= 1:
        raise ValueError("tau must be in (0, 1]")
    unit = _unit_rows(s.vectors)
    kept: list[int] = []
    leaders = np.empty((0, s.dim))
    for i, row in enumerate(unit):
        if leaders.shape[0] and float(np.max(leaders @ row)) >= tau:
            continue
        kept.append(i)
        leaders = np.vstack([leaders, row])
    return kept


def retrieve_neighbors(query, pool: EmbeddingSet, k: int = 4) -> list[int]:
    """Indices of the ``k`` highest-cosine pool rows, best first; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if pool.n == 0:
        raise ValueError("empty pool")
    query = np.asarray(query, dtype=np.float64).ravel()
    if query.size != pool.dim:
        raise ValueError(f"query has dim {query.size}, pool has dim {pool.dim}")
    sims = _unit_rows(pool.vectors) @ _unit_rows(query[None])[0]
    order = np.lexsort((np.arange(pool.n), -sims))
    return [int(i) for i in order[: min(k, pool.n)]]


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", d, d)


def _inertia(x, centroids, assignment) -> float:
    d = x - centroids[assignment]
    return float(np.sum(d * d))


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    closest = np.sum((x - x[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total == 0.0:
            # All remaining points coincide with a center; take the first unused index.
            nxt = next(i for i in range(n) if i not in centers)
        else:
            nxt = int(rng.choice(n, p=closest / total))
        centers.append(nxt)
        closest = np.minimum(closest, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[centers].copy()


def _repair_empty(x, centroids, assignment, k):
    """Give each empty cluster the point currently farthest from its own centroid."""
    for j in range(k):
        counts = np.bincount(assignment, minlength=k)
        if counts[j]:
            continue
        dist = np.sum((x - centroids[assignment]) ** 2, axis=1)
        donors = counts[assignment] > 1
        dist = np.where(donors, dist, -1.0)
        i = int(np.argmax(dist))
        assignment[i] = j
        centroids[j] = x[i]
    return assignment


def kmeans(s: EmbeddingSet | np.ndarray, k: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """k-means++ seeding, then Lloyd iterations until the assignment stops changing.

    Runs in Euclidean geometry; normalize rows beforehand for cosine geometry.
    """
    x = s.vectors if isinstance(s, EmbeddingSet) else np.atleast_2d(np.asarray(s, dtype=np.float64))
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, n={n}]")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, k, rng)
    assignment = np.argmin(_sq_dists(x, centroids), axis=1)
    assignment = _repair_empty(x, centroids, assignment, k)
    history = [_inertia(x, centroids, assignment)]
    iterations = 0
    for iterations in range(1, max_iters + 1):
        for j in range(k):
            centroids[j] = x[assignment == j].mean(axis=0)
        history.append(_inertia(x, centroids, assignment))
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        new = _repair_empty(x, centroids, new, k)
        inertia = _inertia(x, centroids, new)
        history.append(inertia)
        prev = history[-3]
        # Lloyd steps never increase inertia; allow only floating-point slack.
        assert history[-2] <= prev + 1e-9 * max(1.0, prev), "inertia increased in update step"
        assert inertia <= history[-2] + 1e-9 * max(1.0, prev), "inertia increased in assignment step"
        if np.array_equal(new, assignment):
            break
        assignment = new
    for j in range(k):
        centroids[j] = x[assignment == j].mean(axis=0)
    final = _inertia(x, centroids, assignment)
    return KMeansResult(centroids, assignment, final, iterations, history)


def curate(embeddings: EmbeddingSet, pool: EmbeddingSet | None = None, tau: float = 0.95,
           retrieve_k: int = 4, kmeans_k: int = 1000, seed: int = 0, max_iters: int = 100):
    """Dedup the seed set, pull each kept row's nearest neighbors from ``pool``, group with k-means.

    Returns (kept indices into ``embeddings``, retrieved pool indices, KMeansResult
    over the union of kept rows and retrieved rows).
    """
    kept = dedup(embeddings, tau)
    base = embeddings.subset(kept)
    retrieved: list[int] = []
    if pool is not None and pool.n:
        seen = set()
        for row in base.vectors:
            for j in retrieve_neighbors(row, pool, retrieve_k):
                if j not in seen:
                    seen.add(j)
                    retrieved.append(j)
    rows = [base.vectors]
    if retrieved:
        rows.append(pool.vectors[retrieved])
    combined = _unit_rows(np.vstack(rows))
    result = kmeans(combined, min(kmeans_k, combined.shape[0]), max_iters=max_iters, seed=seed)
    return kept, retrieved, result
