"""Exact K-nearest-neighbour tables over xyz.

The KD-tree only proposes candidates. Final ordering uses squared distances
recomputed from the float64 coordinates with ties broken by ascending point
index, so results are identical to an O(n^2) scan.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientPoints

_PAD = 8


@dataclass(frozen=True)
class NeighborTable:
    k: int
    indices: np.ndarray  # (n, k) int64, nearest first
    radii: np.ndarray  # (n,) distance to the k-th neighbour


class SpatialIndex:
    def __init__(self, xyz):
        xyz = np.ascontiguousarray(getattr(xyz, "xyz", xyz), dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3 or xyz.shape[0] < 1:
            raise InsufficientPoints("an index needs at least one 3D point")
        self.xyz = xyz
        self.tree = cKDTree(xyz)

    @property
    def n(self) -> int:
        return self.xyz.shape[0]


def build_index(cloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def _sqdist(support, queries, cand):
    # fixed summation order so equal distances round identically
    diff = support[cand] - queries[:, None, :]
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


def _select(index, queries, k, self_idx):
    """k nearest of ``queries`` in ``index``; ``self_idx`` (or None) is excluded per row."""
    n = index.n
    q = queries.shape[0]
    extra = 0 if self_idx is None else 1
    m = min(k + extra + _PAD, n)
    _, cand = index.tree.query(queries, k=m)
    cand = np.asarray(cand, dtype=np.int64).reshape(q, m)
    d2 = _sqdist(index.xyz, queries, cand)
    if self_idx is not None:
        d2 = np.where(cand == self_idx[:, None], np.inf, d2)
    order = np.lexsort((cand, d2), axis=-1)
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    out_idx = cand[:, :k].copy()
    out_d2 = d2[:, :k].copy()

    if m < n:
        # a row is only safe if some candidate lies strictly beyond the k-th distance
        finite = np.where(np.isfinite(d2), d2, -np.inf)
        worst = finite.max(axis=1)
        kth = out_d2[:, -1]
        unsafe = np.nonzero(~(worst > kth * (1 + 1e-9)))[0]
        for i in unsafe:
            r = np.sqrt(kth[i]) * (1 + 1e-9) + 1e-12
            ball = np.asarray(index.tree.query_ball_point(queries[i], r), dtype=np.int64)
            if self_idx is not None:
                ball = ball[ball != self_idx[i]]
            bd2 = _sqdist(index.xyz, queries[i:i + 1], ball[None, :])[0]
            o = np.lexsort((ball, bd2))[:k]
            out_idx[i] = ball[o]
            out_d2[i] = bd2[o]
    return out_idx, out_d2


def knn(index: SpatialIndex, k: int) -> NeighborTable:
    """Self-excluded k-NN table for every indexed point."""
    if k < 1:
        raise ValueError("k must be positive")
    if index.n <= k:
        raise InsufficientPoints(f"need more than k={k} points, have {index.n}")
    idx, d2 = _select(index, index.xyz, k, np.arange(index.n))
    return NeighborTable(k=k, indices=idx, radii=np.sqrt(d2[:, -1]))


def query(index: SpatialIndex, points, k: int = 1):
    """k nearest indexed points for arbitrary query points (no self exclusion).

    Returns ``(indices, distances)`` each of shape (q, k).
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if index.n < k:
        raise InsufficientPoints(f"need at least k={k} points, have {index.n}")
    idx, d2 = _select(index, points, k, None)
    return idx, np.sqrt(d2)


def nearest(index: SpatialIndex, points) -> np.ndarray:
    return query(index, points, 1)[0][:, 0]
