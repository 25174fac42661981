"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its inputs and a closure mapping the output gradient to
input gradients. The graph is rebuilt on each forward pass and dropped by
:func:`backward`.

Broadcasting is limited to two cases: a scalar operand, or an operand whose
shape is a suffix of the other's (leading-batch). Anything else raises
:class:`DimensionError`; use :func:`broadcast_to` to be explicit.
"""

from __future__ import annotations

import contextlib
import functools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.require(np.asarray(data, dtype=DTYPE), requirements="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

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
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

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
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- broadcasting


def _broadcast_kind(a: tuple, b: tuple) -> str:
    if a == b:
        return "same"
    if len(b) == 0 or (len(b) == 1 and b[0] == 1 and len(a) != 1):
        return "b_scalar"
    if len(a) == 0 or (len(a) == 1 and a[0] == 1 and len(b) != 1):
        return "a_scalar"
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return "b_suffix"
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return "a_suffix"
    raise DimensionError(f"cannot broadcast shapes {a} and {b}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or (shape == (1,) and g.shape != (1,)):
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a.shape, b.shape)
    out = fwd(a.data, b.data)

    def backward(g):
        return (
            _reduce_to(da(g, a.data, b.data, out), a.shape) if a.requires_grad else None,
            _reduce_to(db(g, a.data, b.data, out), b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y
    )


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast following numpy rules (size-1 or missing leading axes)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape

    def backward(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _record(out, (x,), backward)


# ----------------------------------------------------------------- elementwise


def _unary(x: Tensor, out: np.ndarray, dfn) -> Tensor:
    return _record(out, (x,), lambda g: (dfn(g, out),))


def neg(x: Tensor) -> Tensor:
    return _unary(x, -x.data, lambda g, o: -g)


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return _unary(x, xd**exponent, lambda g, o: g * exponent * xd ** (exponent - 1))


def exp(x: Tensor) -> Tensor:
    return _unary(x, np.exp(x.data), lambda g, o: g * o)


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _unary(x, np.log(xd), lambda g, o: g / xd)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    return _unary(x, _sigmoid(x.data), lambda g, o: g * o * (1.0 - o))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) evaluated without overflow."""
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _unary(x, out, lambda g, o: g * _sigmoid(-z))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, x.data * mask, lambda g, o: g * mask)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient is zero where the clamp is active."""
    keep = x.data >= lo
    return _unary(x, np.where(keep, x.data, lo), lambda g, o: g * keep)


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (x,), backward)


def take_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    """Gather along axis 0; duplicate indices accumulate in the gradient."""
    return getitem(x, (np.asarray(rows, dtype=np.int64),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != axis
        ):
            raise DimensionError(f"concat shape mismatch {xs[0].shape} vs {x.shape}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _record(out, xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product. A leading batch axis on ``a`` alone is allowed."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ContractError(f"axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(out, (x, gain, bias), backward)


# ------------------------------------------------------------------ convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in x H x W map with C_out x C_in x k x k kernels."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ContractError(f"conv2d kernel size must be odd, got {k}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d bias {b.shape} vs {w.shape[0]} output channels")
    c, h, wd = x.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if k > hp or k > wp:
        raise DimensionError(f"kernel {k}x{k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if k == 1:
        cols = xp[:, ::stride, ::stride][:, :ho, :wo]
        out = np.tensordot(w.data[:, :, 0, 0], cols, axes=(1, 0))
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        cols = win[:, ::stride, ::stride][:, :ho, :wo]  # C, ho, wo, k, k
        out = np.tensordot(w.data, cols, axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        out += b.data[:, None, None]
    wdata = w.data

    def backward(g):
        gw = gb = gx = None
        if w.requires_grad:
            if k == 1:
                gw = np.tensordot(g, cols, axes=([1, 2], [1, 2]))[:, :, None, None]
            else:
                gw = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(1, 2))
        if x.requires_grad:
            gxp = np.zeros((c, hp, wp), dtype=DTYPE)
            if k == 1:
                gxp[:, : stride * ho : stride, : stride * wo : stride] = np.tensordot(
                    wdata[:, :, 0, 0], g, axes=(0, 0))
            else:
                gcols = np.tensordot(wdata, g, axes=(0, 0))  # C, k, k, ho, wo
                for i in range(k):
                    for j in range(k):
                        gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, backward)


@functools.lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out x n_in), half-pixel centres (align_corners=False)."""
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Resize a C x H x W map; separable, so it is two matrix products."""
    if height < 1 or width < 1:
        raise ContractError(f"target size must be positive, got {height}x{width}")
    if x.ndim != 3:
        raise DimensionError(f"resize_bilinear expects C x H x W, got {x.shape}")
    _, h, w = x.shape
    if (h, w) == (height, width):
        return x
    rh, rw = bilinear_matrix(h, height), bilinear_matrix(w, width)
    out = rh @ (x.data @ rw.T)
    return _record(out, (x,), lambda g: (rh.T @ (g @ rw),))


# -------------------------------------------------------------------- autodiff


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable t with requires_grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a graph with trainable inputs")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if free_graph:
        for node in order:
            node._parents = ()
            node._backward = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      indices: Iterable[int] | None = None) -> float:
    """Largest relative gap between the autodiff gradient and central differences.

    ``indices`` restricts the comparison to selected flat positions of ``x``.
    ``x.data`` is perturbed in place and restored.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = x.grad.reshape(-1).copy()
    x.grad = None
    x.requires_grad = was
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
