"""Training objectives for the simulator and the corrector.

Position arguments accept a :class:`LabeledSurface`, a numpy array or a
:class:`Tensor`, each of shape ``(N, 3)`` or batched ``(B, N, 3)``. Batched
losses are averaged over the batch. Labels, landmarks and adjacency come from a
:class:`SurfaceLayout`, which is derived from the surfaces when not given.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .surface import JAW, MIDFACE, LabeledSurface, edges
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3  # smoothness
    beta: float = 0.1  # simulator L2
    lam: float = 0.1  # corrector L2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SurfaceLayout:
    """Everything the losses need that is shared by surfaces in correspondence."""

    n_vertices: int
    region: np.ndarray
    landmarks: np.ndarray
    edge_src: np.ndarray  # directed one-ring edges
    edge_dst: np.ndarray
    edge_weight: np.ndarray  # 1 / |one-ring(src)|

    @classmethod
    def from_surface(cls, surface: LabeledSurface) -> "SurfaceLayout":
        e = edges(surface.faces)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        deg = np.bincount(src, minlength=surface.n_vertices)
        return cls(
            surface.n_vertices,
            surface.region.copy(),
            surface.landmarks.copy(),
            src,
            dst,
            1.0 / deg[src] if len(src) else np.zeros(0),
        )

    @property
    def jaw_index(self) -> np.ndarray:
        return np.flatnonzero(self.region == JAW)

    @property
    def midface_index(self) -> np.ndarray:
        return np.flatnonzero(self.region == MIDFACE)


@dataclass
class SimulatorLoss:
    total: Tensor
    jaw: float
    midface: float
    smooth: float
    reg: float


def _positions(x) -> Tensor:
    if isinstance(x, LabeledSurface):
        return Tensor(x.vertices)
    return T.as_tensor(x)


def _layout(layout, *surfaces) -> SurfaceLayout:
    labeled = [s for s in surfaces if isinstance(s, LabeledSurface)]
    for s in labeled[1:]:
        if not labeled[0].same_layout(s):
            raise ValueError("surfaces are not in correspondence (vertex count, labels or landmarks differ)")
    if layout is not None:
        for s in labeled:
            if s.n_vertices != layout.n_vertices:
                raise ValueError("surface does not match the layout's vertex count")
        return layout
    if not labeled:
        raise ValueError("a SurfaceLayout is required when no LabeledSurface is given")
    return SurfaceLayout.from_surface(labeled[0])


def _check_pair(a: Tensor, b: Tensor, n: int):
    if a.shape[-2:] != (n, 3) or b.shape[-2:] != (n, 3):
        raise ValueError(f"expected positions with {n} vertices, got {a.shape} and {b.shape}")


def _rows(x: Tensor, idx) -> Tensor:
    return T.gather_rows(x, idx, shared=x.ndim == 3)


def _batch_mean(total: Tensor, x: Tensor) -> Tensor:
    return T.mul(total, 1.0 / x.shape[0]) if x.ndim == 3 else total


def relative_coords(surface, layout: SurfaceLayout | None = None) -> Tensor:
    """Jaw vertex positions relative to every landmark, ``(..., N_jaw, K, 3)``."""
    layout = _layout(layout, surface)
    x = _positions(surface)
    jaw = layout.jaw_index
    if len(jaw) == 0:
        raise ValueError("surface has no jaw vertices")
    if len(layout.landmarks) == 0:
        raise ValueError("relative coordinates need at least one landmark")
    return _rows(x, jaw[:, None]) - _rows(x, layout.landmarks[None, :])


def jaw_loss(deformed, simulated, layout: SurfaceLayout | None = None) -> Tensor:
    """Mean over jaw vertices of the summed landmark-relative coordinate errors."""
    layout = _layout(layout, deformed, simulated)
    d, s = _positions(deformed), _positions(simulated)
    _check_pair(d, s, layout.n_vertices)
    diff = relative_coords(d, layout) - relative_coords(s, layout)
    total = T.mul(T.sum(T.norm_rows(diff)), 1.0 / len(layout.jaw_index))
    return _batch_mean(total, s)


def midface_loss(normal, simulated, layout: SurfaceLayout | None = None) -> Tensor:
    layout = _layout(layout, normal, simulated)
    a, b = _positions(normal), _positions(simulated)
    _check_pair(a, b, layout.n_vertices)
    mid = layout.midface_index
    if len(mid) == 0:
        return Tensor(0.0)
    total = T.mul(T.sum(T.norm_rows(_rows(b, mid) - _rows(a, mid))), 1.0 / len(mid))
    return _batch_mean(total, b)


def smooth_loss(field, adjacency) -> Tensor:
    """Mean over vertices of the average displacement change across one-ring edges.

    ``adjacency`` is a :class:`SurfaceLayout` or a per-vertex list of neighbor
    sets. Vertices without neighbors contribute zero.
    """
    if not isinstance(adjacency, SurfaceLayout):
        rings = list(adjacency)
        src = np.array([i for i, r in enumerate(rings) for _ in r], dtype=np.int64)
        dst = np.array([j for r in rings for j in sorted(r)], dtype=np.int64)
        w = np.array([1.0 / len(r) for r in rings for _ in r])
        n = len(rings)
    else:
        src, dst, w, n = adjacency.edge_src, adjacency.edge_dst, adjacency.edge_weight, adjacency.n_vertices
    u = T.as_tensor(field.vectors if hasattr(field, "vectors") else field)
    if u.shape[-2:] != (n, 3):
        raise ValueError(f"field has shape {u.shape}, adjacency covers {n} vertices")
    if len(src) == 0:
        return Tensor(0.0)
    lengths = T.norm_rows(_rows(u, src) - _rows(u, dst))
    total = T.mul(T.sum(T.mul(lengths, w)), 1.0 / n)
    return _batch_mean(total, u)


def l2_reg(params: Iterable[Parameter]) -> Tensor:
    """Sum of squared weight entries; biases are left out."""
    terms = [T.sum_squares(p) for p in params if not getattr(p, "is_bias", False)]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def weighted_simulator_loss(jaw, midface, smooth, reg, weights: LossWeights) -> Tensor:
    return jaw + midface + T.mul(smooth, weights.alpha) + T.mul(reg, weights.beta)


def simulator_loss(
    deformed,
    normal,
    simulated,
    field,
    weights: LossWeights = LossWeights(),
    params: Sequence[Parameter] = (),
    layout: SurfaceLayout | None = None,
) -> SimulatorLoss:
    layout = _layout(layout, deformed, normal, simulated)
    lj = jaw_loss(deformed, simulated, layout)
    lm = midface_loss(normal, simulated, layout)
    ls = smooth_loss(field, layout)
    lr = l2_reg(params)
    total = weighted_simulator_loss(lj, lm, ls, lr, weights)
    return SimulatorLoss(total, lj.item(), lm.item(), ls.item(), lr.item())


def corrector_loss(corrected, normal, params: Sequence[Parameter] = (), lam: float = 0.1) -> Tensor:
    """Mean vertex distance to the normal surface plus ``lam`` times the L2 term."""
    if isinstance(corrected, LabeledSurface) and isinstance(normal, LabeledSurface):
        if corrected.n_vertices != normal.n_vertices:
            raise ValueError("corrected and normal surfaces differ in vertex count")
    c, n = _positions(corrected), _positions(normal)
    if c.shape != n.shape:
        raise ValueError(f"corrected {c.shape} and normal {n.shape} positions differ in shape")
    count = c.shape[-2]
    total = T.mul(T.sum(T.norm_rows(c - n)), 1.0 / count)
    total = _batch_mean(total, c)
    return total + T.mul(l2_reg(params), lam)
