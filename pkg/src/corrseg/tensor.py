"""Dense tensors with a define-by-run gradient tape.

A :class:`Tensor` is an immutable wrapper around a numpy array.  Operations
executed while a :class:`GradTape` is active (and that touch at least one
tensor with ``requires_grad``) are recorded on the tape together with a
closure computing the vector-Jacobian product.  ``GradTape.gradient`` walks
the record backwards, visiting every operation once.

Every operation checks that its output is finite; a NaN or Inf raises
:class:`NumericalError` at the op that produced it.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class NumericalError(ArithmeticError):
    """A non-finite value or an undefined operation (e.g. normalizing a zero row)."""


class ShapeError(ValueError):
    pass


def _active_tape() -> "GradTape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class GradTape:
    """Ordered record of differentiable operations executed in its context.

    Use as a context manager; tapes nest, and only the innermost one records.
    """

    nodes: list[_Node] = field(default_factory=list)
    visit_log: list[str] | None = None

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(source) for every source (zeros if unreachable)."""
        if loss.size != 1:
            raise ShapeError(f"gradient needs a scalar loss, got shape {loss.shape}")
        source_ids = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        kept: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            key = id(node.out)
            g = grads.pop(key, None)
            if g is None:
                continue
            if key in source_ids:
                kept[key] = g
            if self.visit_log is not None:
                self.visit_log.append(node.name)
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        grads.update(kept)
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = np.zeros_like(s.data)
            elif not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient")
            out.append(g)
        return out


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, name: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{name} produced a non-finite value")
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, parents, backward, name))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


hadamard = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericalError("division by zero")
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def scalar_mul(a, s: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0  # subgradient 0 at exactly 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return _make(np.maximum(a.data, lo), (a,), lambda g: (g * keep,), "clip_min")


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# --------------------------------------------------------------------------
# shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def take(a, idx, axis: int = 0) -> Tensor:
    """Select slices ``idx`` along ``axis``; idx must not repeat."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = idx
        full[tuple(sl)] = g
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), back, "take")


def scatter(a, idx, size: int, axis: int = 0) -> Tensor:
    """Inverse of :func:`take`: place slices of ``a`` at ``idx`` in a zero tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.data.dtype)
    sl = [slice(None)] * len(shape)
    sl[axis] = idx
    out[tuple(sl)] = a.data
    return _make(out, (a,), lambda g: (np.take(g, idx, axis=axis),), "scatter")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# --------------------------------------------------------------------------
# linear algebra and normalizations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def l2_norm_rows(a) -> Tensor:
    """Euclidean norm of every row of a 2-D tensor, shape ``[n, 1]``.

    No epsilon is added: a zero row raises :class:`NumericalError`.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("l2_norm_rows expects a 2-D tensor")
    ad = a.data
    norms = np.sqrt((ad * ad).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        rows = np.flatnonzero(norms[:, 0] == 0)
        raise NumericalError(f"zero-norm row(s) {rows[:5].tolist()} in l2_norm_rows")
    return _make(norms, (a,), lambda g: (g * ad / norms,), "l2_norm_rows")


def normalize_rows(a) -> Tensor:
    a = as_tensor(a)
    return div(a, l2_norm_rows(a))


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``a`` over its last axis, then scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        rows = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=rows), g.sum(axis=rows)

    return _make(xhat * gd + beta.data, (a, gamma, beta), back, "layer_norm")


# --------------------------------------------------------------------------
# spatial resampling on [c, h, w]


def avg_pool2x2(a) -> Tensor:
    a = as_tensor(a)
    c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even extents, got {h}x{w}")
    out = a.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _make(out, (a,), back, "avg_pool2x2")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` interpolation matrix, half-pixel centers."""
    if n_out <= 0 or n_in <= 0:
        raise ShapeError("resize extents must be positive")
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def bilinear_resize(a, h: int, w: int) -> Tensor:
    """Resize ``[c, h0, w0]`` to ``[c, h, w]`` (align_corners=False semantics)."""
    a = as_tensor(a)
    if h <= 0 or w <= 0:
        raise ShapeError("resize extents must be positive")
    _, h0, w0 = a.shape
    if (h, w) == (h0, w0):
        return a
    ry, rx = bilinear_matrix(h0, h), bilinear_matrix(w0, w)
    out = np.einsum("yi,cij,xj->cyx", ry, a.data, rx, optimize=True)
    return _make(out, (a,),
                 lambda g: (np.einsum("yi,cyx,xj->cij", ry, g, rx, optimize=True),),
                 "bilinear_resize")


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tol: float
    n_entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor turns the comparison into an absolute one for entries whose
    gradient is itself below ``floor``, where central differences carry
    roundoff of the same order as the value.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray],
               h: float = 1e-5, tol: float = 1e-4, names: Iterable[str] | None = None,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``f`` receives one :class:`Tensor` per entry of ``params`` and must be
    deterministic.  ``max_entries`` caps the number of probed coordinates per
    parameter (chosen with a seeded RNG); ``None`` probes every coordinate.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    leaves = [Tensor(p.copy(), requires_grad=True) for p in params]
    with GradTape() as tape:
        loss = f(leaves)
    if not np.isfinite(loss.data).all():
        raise NumericalError("grad_check: non-finite loss")
    analytic = tape.gradient(loss, leaves)

    def value(arrays):
        return float(f([Tensor(x) for x in arrays]).data)

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    worst, count = 0.0, 0
    for k, (name, p) in enumerate(zip(names, params)):
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = rng.choice(p.size, size=max_entries, replace=False)
        errs = []
        flat = p.reshape(-1)
        for i in flat_idx:
            orig = flat[i]
            flat[i] = orig + h
            up = value(params)
            flat[i] = orig - h
            down = value(params)
            flat[i] = orig
            num = (up - down) / (2 * h)
            errs.append(float(relative_error(analytic[k].reshape(-1)[i], num)))
        per_param[name] = max(errs) if errs else 0.0
        worst = max(worst, per_param[name])
        count += len(flat_idx)
    return GradCheckReport(worst, per_param, tol, count)
