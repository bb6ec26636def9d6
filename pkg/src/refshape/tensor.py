"""A small dense tensor engine with reverse-mode differentiation and Adam.

Values are float64 numpy arrays. Each op returns a new ``Tensor`` that records
its inputs and a closure mapping the output gradient to input gradients.
``backward`` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment buffers."""

    __slots__ = ("name", "is_bias", "m", "v", "step")

    def __init__(self, data, name: str = "", is_bias: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.is_bias = is_bias
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _make(np.maximum(x.data, 0.0), (x,), bw)


def mask_rows(x, keep) -> Tensor:
    """Zero every row (last axis) where ``keep`` is False; zeros are +0.0."""
    x = as_tensor(x)
    keep = np.asarray(keep, dtype=bool)[..., None]
    if keep.ndim > x.ndim:
        raise ValueError("mask has more axes than the tensor")

    def bw(g):
        return (np.where(keep, g, 0.0),)

    return _make(np.where(keep, x.data, 0.0), (x,), bw)


# ---------------------------------------------------------------------- linear


def matmul(a, w) -> Tensor:
    """``(..., n) @ (n, m) -> (..., m)``."""
    a, w = as_tensor(a), as_tensor(w)
    if w.ndim != 2 or a.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {w.shape} are incompatible")

    def bw(g):
        ga = g @ w.data.T if a.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, w.shape[1])
        return ga, gw

    return _make(a.data @ w.data, (a, w), bw)


def linear(a, w, b) -> Tensor:
    """Fused ``a @ w + b`` for ``(..., n) @ (n, m)`` plus a bias of shape ``(m,)``."""
    a, w, b = as_tensor(a), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or a.ndim < 1 or a.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear: shapes {a.shape}, {w.shape}, {b.shape} are incompatible")
    out = (a.data.reshape(-1, a.shape[-1]) @ w.data).reshape(a.shape[:-1] + (w.shape[1],))
    out += b.data

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        ga = (g2 @ w.data.T).reshape(a.shape) if a.requires_grad else None
        gw = a.data.reshape(-1, a.shape[-1]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return ga, gw, gb

    return _make(out, (a, w, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    lead = ts[0].shape[:-1]
    for t in ts:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat: leading shapes {lead} and {t.shape[:-1]} differ")
    if axis not in (-1, ts[0].ndim - 1):
        raise ValueError("concat is only defined over the last axis")
    widths = np.cumsum([t.shape[-1] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, widths, axis=-1))

    return _make(np.concatenate([t.data for t in ts], axis=-1), tuple(ts), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bw)


# ------------------------------------------------------------------ gathering


def gather_rows(x, index, shared: bool = False) -> Tensor:
    """Pick rows along the second-to-last axis.

    ``x`` is ``(N, C)`` with any integer ``index`` -> ``index.shape + (C,)``, or
    ``(B, N, C)`` with ``index`` of shape ``(B, ...)`` -> ``(B, ...) + (C,)``.
    With ``shared=True`` one unbatched index is applied to every batch entry.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim == 2:
        n, c = x.shape
        flat = index.reshape(-1)
        out = x.data[index]
    elif x.ndim == 3:
        b, n, c = x.shape
        if shared:
            index = np.broadcast_to(index, (b,) + index.shape)
        elif index.ndim == 0 or index.shape[0] != b:
            raise ValueError(f"gather_rows: index leading axis must be the batch size {b}")
        offs = (np.arange(b) * n).reshape((b,) + (1,) * (index.ndim - 1))
        flat = (index + offs).reshape(-1)
        out = x.data.reshape(b * n, c)[flat].reshape(index.shape + (c,))
    else:
        raise ValueError("gather_rows expects a 2-D or 3-D tensor")
    if flat.size and (flat.min() < 0 or index.max() >= n):
        raise ValueError("gather_rows: index out of range")
    shape = x.shape

    def bw(g):
        rows = int(np.prod(shape[:-1]))
        # one nonzero per gathered row; the transpose product scatter-adds
        pick = sparse.csr_matrix((np.ones(flat.size), flat, np.arange(flat.size + 1)), shape=(flat.size, rows))
        return (np.asarray(pick.T @ g.reshape(-1, c)).reshape(shape),)

    return _make(out, (x,), bw)


def group_max(x, axis: int = -2) -> Tensor:
    """Max over the group axis; gradient goes to the first maximal entry only."""
    x = as_tensor(x)
    ax = axis % x.ndim
    arg = np.expand_dims(x.data.argmax(axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax)

    def bw(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, arg, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(np.squeeze(out, axis=ax), (x,), bw)


def modulated_group_max(features, groups, weights) -> Tensor:
    """``out[b, m, c] = max_j features[b, groups[b, m, j], c] * weights[b, m, j, c]``.

    Fused gather, product and max-pool. The argmax (first index on ties) is only
    resolved when gradients are requested.
    """
    f, w = as_tensor(features), as_tensor(weights)
    groups = np.asarray(groups, dtype=np.int64)
    if f.ndim != 3 or groups.ndim != 3 or w.shape != groups.shape + (f.shape[-1],):
        raise ValueError(f"modulated_group_max: shapes {f.shape}, {groups.shape}, {w.shape} disagree")
    b, p, c = f.shape
    if groups.size and (groups.min() < 0 or groups.max() >= p):
        raise ValueError("modulated_group_max: group index out of range")
    rows = groups + (np.arange(b) * p)[:, None, None]
    picked = f.data.reshape(b * p, c)[rows]
    prod = picked * w.data
    out = prod.max(axis=2)

    def bw(g):
        arg = prod.argmax(axis=2)[:, :, None, :]
        gw = None
        if w.requires_grad:
            gw = np.zeros(w.shape)
            np.put_along_axis(gw, arg, (g[:, :, None, :] * np.take_along_axis(picked, arg, axis=2)), axis=2)
        gf = None
        if f.requires_grad:
            src = np.take_along_axis(np.broadcast_to(rows[..., None], prod.shape), arg, axis=2)[:, :, 0, :]
            contrib = g * np.take_along_axis(w.data, arg, axis=2)[:, :, 0, :]
            flat = (src * c + np.arange(c)).ravel()
            gf = np.bincount(flat, weights=contrib.ravel(), minlength=b * p * c).reshape(f.shape)
        return gf, gw

    return _make(out, (f, w), bw)


# ------------------------------------------------------------------ reductions


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def norm_rows(x) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    x = as_tensor(x)
    n = np.sqrt(np.einsum("...k,...k->...", x.data, x.data))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (x.data * scale[..., None],)

    return _make(n, (x,), bw)


def sum_squares(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (2.0 * g * x.data,)

    return _make(np.vdot(x.data.ravel(), x.data.ravel()), (x,), bw)


def weighted_rows(x, index, weight) -> Tensor:
    """``out[..., q, :] = sum_j weight[..., q, j] * x[..., index[..., q, j], :]``."""
    picked = gather_rows(x, index)
    w = np.asarray(weight, dtype=np.float64)[..., None]
    return sum(mul(picked, w), axis=-2)


# -------------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ------------------------------------------------------------------------ Adam


class OptimizerStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def adam_step(params: Iterable[Parameter], cfg: AdamConfig) -> None:
    """One bias-corrected Adam update; clears gradients afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise OptimizerStateError(f"parameter {p.name or '?'} has no gradient")
    for p in params:
        g = p.grad
        p.step += 1
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * g
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * (g * g)
        m_hat = p.m / (1.0 - cfg.beta1**p.step)
        v_hat = p.v / (1.0 - cfg.beta2**p.step)
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p.grad = None


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------------------ init


def seeded_init(shape, seed, bias: bool = False, name: str = "") -> Parameter:
    """Glorot-uniform weights from ``seed``; biases start at zero."""
    shape = tuple(int(s) for s in shape)
    if bias:
        return Parameter(np.zeros(shape), name=name, is_bias=True)
    fan_in = shape[0] if len(shape) >= 1 else 1
    fan_out = shape[-1] if len(shape) >= 2 else 1
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name)
