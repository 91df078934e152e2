"""Exact nearest-neighbour search over embedding tables.

Two interchangeable backends: an exhaustive scan and a KD-tree (scipy's
``cKDTree``) used only to shortlist candidates. Final distances always come
from :func:`distances`, and ties are broken by ascending id, so both
backends return identical results.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree

BACKENDS = ("brute-force", "partition-tree", "auto")
AUTO_TREE_THRESHOLD = 1000
_BLOCK_BYTES = 1 << 17


class NeighbourIndexError(ValueError):
    pass


class StaleIndexError(NeighbourIndexError):
    pass


def distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Euclidean distance of each row of ``points`` to ``query``.

    Rows are processed in fixed-size blocks so the temporaries stay in cache
    and the cost grows linearly with the number of rows.
    """
    n = points.shape[0]
    out = np.empty(n)
    block = max(1, _BLOCK_BYTES // (8 * max(1, points.shape[1])))
    for start in range(0, n, block):
        diff = points[start:start + block] - query
        np.einsum("ij,ij->i", diff, diff, out=out[start:start + block])
    return np.sqrt(out, out=out)


def _fingerprint(points: np.ndarray) -> str:
    import hashlib

    return hashlib.blake2b(np.ascontiguousarray(points).tobytes(), digest_size=16).hexdigest()


@dataclass(frozen=True)
class Neighbour:
    id: int
    distance: float


class NeighbourIndex:
    """Exact m-NN index over the rows of a table.

    Parameters
    ----------
    points : (n, d) array
        Row ``i`` is the vector of item ``i``.
    backend : {"brute-force", "partition-tree", "auto"}
        ``auto`` uses the tree once ``n >= tree_threshold``.
    """

    def __init__(self, points: np.ndarray, backend: str = "auto",
                 tree_threshold: int = AUTO_TREE_THRESHOLD, source_fingerprint: str | None = None):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}")
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1:
            raise NeighbourIndexError("need a non-empty 2-d table")
        bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
        if len(bad):
            raise NeighbourIndexError(f"non-finite embedding for id {int(bad[0])}")
        if backend == "auto":
            backend = "partition-tree" if points.shape[0] >= tree_threshold else "brute-force"
        self.backend = backend
        self.points = points
        self.fingerprint = _fingerprint(points)
        self.source_fingerprint = source_fingerprint
        self._tree = cKDTree(points) if backend == "partition-tree" else None

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def check(self, fingerprint: str) -> None:
        if self.source_fingerprint is not None and self.source_fingerprint != fingerprint:
            raise StaleIndexError("index was built from a different model")

    def query(self, point, m: int, exclude: Iterable[int] | None = None) -> list[Neighbour]:
        """The ``m`` nearest rows to ``point``, nearest first, ties by id."""
        ids, dist = self.query_arrays(point, m, exclude)
        return [Neighbour(int(i), float(d)) for i, d in zip(ids, dist)]

    def query_arrays(self, point, m: int, exclude: Iterable[int] | None = None):
        q = np.asarray(point, dtype=np.float64)
        if q.shape != (self.dim,):
            raise NeighbourIndexError(f"query has shape {q.shape}, index dimension is {self.dim}")
        if m < 1:
            raise ValueError("m must be >= 1")
        excl = np.fromiter(set(exclude), dtype=np.int64) if exclude else np.empty(0, np.int64)
        if self._tree is None:
            cand = np.arange(self.size)
            d = distances(self.points, q)
        else:
            cand = self._tree_candidates(q, m, len(excl))
            d = distances(self.points[cand], q)
        if len(excl):
            keep = ~np.isin(cand, excl)
            cand, d = cand[keep], d[keep]
        if len(cand) > m:
            kth = np.partition(d, m - 1)[m - 1]
            sel = d <= kth
            cand, d = cand[sel], d[sel]
        order = np.lexsort((cand, d))[:m]
        return cand[order], d[order]

    def _tree_candidates(self, q: np.ndarray, m: int, n_excluded: int) -> np.ndarray:
        want = m + n_excluded
        if want >= self.size:
            return np.arange(self.size)
        dd, _ = self._tree.query(q, k=want)
        radius = float(np.atleast_1d(dd)[-1])
        # Slack so rounding differences never drop a tie at the boundary.
        radius = radius * (1.0 + 1e-9) + 1e-12
        return np.sort(np.asarray(self._tree.query_ball_point(q, radius), dtype=np.int64))


def build(model, backend: str = "auto", tree_threshold: int = AUTO_TREE_THRESHOLD) -> NeighbourIndex:
    """Index over a model's entity table, tagged with the model fingerprint."""
    return NeighbourIndex(model.entity_emb, backend, tree_threshold, model.fingerprint)


def build_relations(model, backend: str = "brute-force") -> NeighbourIndex:
    return NeighbourIndex(model.relation_emb, backend, source_fingerprint=model.fingerprint)


def query(index: NeighbourIndex, point, m: int, exclude=None) -> list[Neighbour]:
    return index.query(point, m, exclude)
