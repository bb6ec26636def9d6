"""Point-set kernels: furthest point sampling, ball grouping, kNN, interpolation.

All kernels are deterministic. Ties in distance are always resolved toward the
smaller point index. Distances are compared as squared Euclidean norms computed
from coordinate differences, independently of whichever spatial index produced
the candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

ZERO_DISTANCE = 1e-10


@dataclass(frozen=True)
class BallGroups:
    """Rectangular neighbor table.

    ``index[i]`` holds the neighbors of center ``i`` ordered by distance, padded
    to ``max_k`` columns by repeating the nearest neighbor. ``count[i]`` is the
    number of genuine entries. ``center_index`` is filled in when the centers are
    a subset of the points (e.g. after sampling), otherwise it is ``None``.
    """

    index: np.ndarray
    count: np.ndarray
    center_index: np.ndarray | None = None

    def neighbors(self, i: int) -> list[int]:
        return self.index[i, : self.count[i]].tolist()


@dataclass(frozen=True)
class InterpWeights:
    index: np.ndarray  # (Q, 3)
    weight: np.ndarray  # (Q, 3)


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {p.shape}")
    return p


# ------------------------------------------------------------------------- FPS


def fps_batch(points: np.ndarray, n_sub: int) -> np.ndarray:
    """Furthest point sampling on a stack of clouds ``(B, N, 3)`` -> ``(B, n_sub)``."""
    b, n, _ = points.shape
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    if not 1 <= n_sub <= n:
        raise ValueError(f"n_sub must lie in [1, {n}], got {n_sub}")
    rows = np.arange(b)
    out = np.empty((b, n_sub), dtype=np.int64)
    mind = np.full((b, n), np.inf)
    nxt = np.zeros(b, dtype=np.int64)
    for i in range(n_sub):
        out[:, i] = nxt
        diff = points - points[rows, nxt][:, None, :]
        d = np.einsum("bnk,bnk->bn", diff, diff)
        np.minimum(mind, d, out=mind)
        mind[rows, nxt] = -1.0  # never reselect
        nxt = mind.argmax(axis=1)
    return out


def furthest_point_sampling(points, n_sub: int) -> np.ndarray:
    """Greedy max-min subset, seeded at index 0, ties to the smallest index."""
    p = _as_points(points)
    if len(p) == 0:
        raise ValueError("cannot sample from an empty point set")
    return fps_batch(p[None], n_sub)[0]


# ----------------------------------------------------------------- neighbor core


def _ordered(queries, points, cand, count_limit, r2=None):
    """Sort candidate lists by (exact squared distance, index) and truncate.

    ``cand`` is a (Q, C) array of candidate indices, ``len(points)`` marking
    missing slots. Returns (index, d2, valid) with ``count_limit`` columns.
    """
    n = len(points)
    valid = cand < n
    safe = np.where(valid, cand, 0)
    diff = points[safe] - queries[:, None, :]
    d2 = np.einsum("qck,qck->qc", diff, diff)
    if r2 is not None:
        valid &= d2 <= r2
    d2 = np.where(valid, d2, np.inf)
    key_idx = np.where(valid, cand, n)
    order = np.lexsort((key_idx, d2), axis=-1)
    d2 = np.take_along_axis(d2, order, axis=1)
    idx = np.take_along_axis(key_idx, order, axis=1)
    return idx[:, :count_limit], d2[:, :count_limit], d2


def _brute(queries, points, k, r2=None):
    diff = points[None, :, :] - queries[:, None, :]
    d2 = np.einsum("qnk,qnk->qn", diff, diff)
    valid = np.ones_like(d2, dtype=bool) if r2 is None else d2 <= r2
    d2 = np.where(valid, d2, np.inf)
    idx = np.broadcast_to(np.arange(len(points)), d2.shape)
    order = np.lexsort((idx, d2), axis=-1)[:, :k]
    return np.take_along_axis(idx, order, axis=1), np.take_along_axis(d2, order, axis=1)


def nearest(queries, points, k, radius=None, tree=None):
    """Up to ``k`` nearest points per query, optionally within ``radius``.

    Returns ``(index, d2)`` of shape (Q, k); missing slots carry index
    ``len(points)`` and distance ``inf``.
    """
    n = len(points)
    q = len(queries)
    if q == 0:
        return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
    kk = min(k + 1, n)
    if tree is None:
        tree = cKDTree(points)
    bound = np.inf if radius is None else radius * (1 + 1e-9) + 1e-12
    _, cand = tree.query(queries, k=kk, distance_upper_bound=bound)
    cand = np.asarray(cand, dtype=np.int64).reshape(q, kk)
    r2 = None if radius is None else radius * radius
    idx, d2, full = _ordered(queries, points, cand, k, r2)
    if kk < k:
        pad = k - kk
        idx = np.concatenate([idx, np.full((q, pad), n)], axis=1)
        d2 = np.concatenate([d2, np.full((q, pad), np.inf)], axis=1)
    if kk == k + 1:
        # A tie straddling the cut, or a row the tree filled completely, may hide
        # an equidistant point with a smaller index; settle those rows exactly.
        last = full[:, k - 1]
        extra = full[:, k]
        suspect = np.isfinite(last) & (extra == last)
        if np.any(suspect):
            rows = np.flatnonzero(suspect)
            bi, bd = _brute(queries[rows], points, k, r2)
            idx[rows] = np.where(np.isfinite(bd), bi, n)
            d2[rows] = bd
    return idx, d2


# ---------------------------------------------------------------- ball query


def ball_query(centers, points, r: float, max_k: int = 32, tree=None, center_index=None) -> BallGroups:
    """Group up to ``max_k`` nearest points within ``r`` of each center.

    A center whose ball is empty gets its single nearest point. Rows are padded
    with their nearest entry so the table is rectangular.
    """
    c = _as_points(centers)
    p = _as_points(points)
    if len(p) == 0:
        raise ValueError("ball_query needs at least one point")
    if r <= 0:
        raise ValueError("radius must be positive")
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    if tree is None:
        tree = cKDTree(p)
    idx, d2 = nearest(c, p, max_k, radius=r, tree=tree)
    count = np.isfinite(d2).sum(axis=1)
    empty = count == 0
    if np.any(empty):
        nidx, _ = nearest(c[empty], p, 1, tree=tree)
        idx[empty, 0] = nidx[:, 0]
        count[empty] = 1
    cols = np.arange(max_k)[None, :]
    idx = np.where(cols < count[:, None], idx, idx[:, :1])
    return BallGroups(idx, count, None if center_index is None else np.asarray(center_index))


# ------------------------------------------------------------------------- kNN


def knn(queries, sources, k: int, tree=None) -> np.ndarray:
    qs = _as_points(queries)
    src = _as_points(sources)
    if k < 1 or k > len(src):
        raise ValueError(f"k must lie in [1, {len(src)}], got {k}")
    idx, _ = nearest(qs, src, k, tree=tree)
    return idx


# --------------------------------------------------------------- interpolation


def interpolation_weights(queries, sources, tree=None) -> InterpWeights:
    """Inverse-distance weights over the 3 nearest sources of each query."""
    qs = _as_points(queries)
    src = _as_points(sources)
    if len(src) < 3:
        raise ValueError("interpolation needs at least 3 source points")
    idx, d2 = nearest(qs, src, 3, tree=tree)
    d = np.sqrt(d2)
    hit = d < ZERO_DISTANCE
    with np.errstate(divide="ignore"):
        inv = np.where(hit, 0.0, 1.0 / np.where(hit, 1.0, d))
    w = inv / inv.sum(axis=1, keepdims=True)
    snapped = hit.any(axis=1)
    if np.any(snapped):
        first = hit.argmax(axis=1)
        onehot = np.zeros_like(w)
        onehot[np.arange(len(w)), first] = 1.0
        w = np.where(snapped[:, None], onehot, w)
    return InterpWeights(idx, w)
