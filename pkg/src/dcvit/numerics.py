"""Dense tensors and a small tape-based reverse-mode differentiator.

Every primitive here takes :class:`Tensor` (or plain numpy / scalar constants)
and returns a fresh :class:`Tensor`. When a :class:`GradTape` is active, each
primitive appends one record holding its output, its inputs and a closure
computing the vector-Jacobian product. :func:`backward` replays those records
in reverse.
"""

from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "softmax",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "tanh",
    "reshape",
    "transpose",
    "swapaxes",
    "sum",
    "mean",
    "amax",
    "getitem",
    "take",
    "concat",
    "broadcast_to",
    "cross_entropy",
    "finite_diff_grad",
    "relative_error",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    """A dense row-major array with an explicit shape.

    Tensors are treated as values: primitives never modify their inputs. The
    only sanctioned mutation is an optimizer writing new parameter values
    between steps.
    """

    __slots__ = ("data", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __getitem__ = lambda self, idx: getitem(self, idx)  # noqa: E731

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype))


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    if not stack:
        return None
    tape = stack[-1]
    return tape if tape.enabled else None


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Ordered log of primitive applications.

    Use as a context manager; primitives evaluated inside the block are
    recorded (per thread). With ``enabled=False`` nothing is recorded.
    """

    enabled: bool = True
    records: list = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self, table: dict[int, np.ndarray], owners: dict[int, Tensor]):
        self._table = table
        self._owners = owners

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        if g is None or self._owners.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._owners.get(id(t)) is t

    def __len__(self) -> int:
        return len(self._table)


def backward(tape: GradTape, output: Tensor, seed=None) -> Gradients:
    """Reverse-mode sweep over ``tape`` starting from ``output``.

    ``seed`` defaults to ones shaped like ``output`` (i.e. d output / d output).
    """
    if seed is None:
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=output.dtype)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")
    table: dict[int, np.ndarray] = {id(output): seed}
    owners: dict[int, Tensor] = {id(output): output}
    for rec in reversed(tape.records):
        g = table.get(id(rec.out))
        if g is None or owners[id(rec.out)] is not rec.out:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not isinstance(inp, Tensor):
                continue
            if gi.dtype != inp.dtype:
                gi = gi.astype(inp.dtype)
            key = id(inp)
            if key in table and owners[key] is inp:
                table[key] = table[key] + gi
            else:
                table[key] = gi
                owners[key] = inp
    return Gradients(table, owners)


def _finite_check(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError("primitive produced a non-finite value")


def _emit(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    _finite_check(data)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(isinstance(i, Tensor) for i in inputs):
        tape.records.append(_Record(out, inputs, vjp))
    return out


def _val(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def _dtype_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return np.float64


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _corrupted() -> bool:
    # negative control for the gradient checker
    return os.environ.get("DCVIT_CORRUPT_BACKWARD", "") not in ("", "0")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    av, bv = _val(a, dt), _val(b, dt)
    out = av + bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    av, bv = _val(a, dt), _val(b, dt)
    return _emit(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    av, bv = _val(a, dt), _val(b, dt)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    dt = _dtype_of(a, b)
    av, bv = _val(a, dt), _val(b, dt)
    out = av / bv
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xv = x.data
    cdf = ndtr(xv)
    out = xv * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
        d = cdf + xv * pdf
        if _corrupted():
            d = d * 1.1
        return (g * d,)

    return _emit(out.astype(xv.dtype, copy=False), (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    dt = _dtype_of(a, b)
    av, bv = _val(a, dt), _val(b, dt)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    out = np.matmul(av, bv)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(out, (a, b), vjp)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W + b`` along the last axis of ``x``."""
    xv, Wv = x.data, _val(W)
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[0]:
        raise ShapeError(f"linear: input {xv.shape} incompatible with weight {Wv.shape}")
    if b is not None and _val(b).shape != (Wv.shape[1],):
        raise ShapeError(f"linear: bias {_val(b).shape} does not match weight {Wv.shape}")
    out = xv @ Wv
    if b is not None:
        out = out + _val(b)

    def vjp(g):
        gx = g @ Wv.T
        g2 = g.reshape(-1, g.shape[-1])
        gW = xv.reshape(-1, xv.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gW, gb

    return _emit(out, (x, W, b), vjp)


# ---------------------------------------------------------------------------
# normalisation / activations


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) marks entries that take part;
    excluded entries get weight 0. A slice with no included entry yields all
    zeros.
    """
    xv = x.data
    if mask is None:
        shifted = xv - xv.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
        filled = np.where(m, xv, -np.inf)
        top = filled.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(m, np.exp(np.where(m, xv - top, 0.0)), 0.0)
        denom = e.sum(axis=axis, keepdims=True)
        out = e / np.where(denom > 0, denom, 1.0)
    out = out.astype(xv.dtype, copy=False)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), vjp)


def softmax_rows(X: Tensor) -> Tensor:
    if X.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {X.shape}")
    return softmax(X, axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xv = x.data
    D = xv.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: last extent {D} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _emit(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = np.broadcast_to(x.data, shape).copy()
    return _emit(out, (x,), lambda g: (_unbroadcast(g, src),))


def getitem(x: Tensor, idx) -> Tensor:
    xv = x.data
    out = np.array(xv[idx], copy=True)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(out, (x,), vjp)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows of ``x`` (embedding lookup)."""
    indices = np.asarray(indices, dtype=np.intp)
    xv = x.data
    out = xv[indices]

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, indices, g)
        return (gx,)

    return _emit(out, (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    vals = [_val(t) for t in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(xs), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xv = x.data
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _emit(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xv = x.data
    count = xv.size if axis is None else math.prod(xv.shape[a] for a in np.atleast_1d(axis))
    out = xv.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xv.shape).copy(),)

    return _emit(np.asarray(out), (x,), vjp)


def amax(x: Tensor, axis: int, mask=None) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry.

    Entries where ``mask`` is False are ignored; a fully masked slice gives 0.
    """
    xv = x.data
    if mask is None:
        filled = xv
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
        filled = np.where(m, xv, -np.inf)
    arg = np.argmax(filled, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    out = np.take_along_axis(filled, arg_k, axis=axis)
    valid = np.isfinite(out)
    out = np.squeeze(np.where(valid, out, 0.0), axis=axis).astype(xv.dtype, copy=False)

    def vjp(g):
        gx = np.zeros_like(xv)
        ge = np.where(valid, np.expand_dims(g, axis), 0.0)
        np.put_along_axis(gx, arg_k, ge, axis=axis)
        return (gx,)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    lv = logits.data
    labels = np.asarray(labels, dtype=np.intp)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ShapeError(f"cross_entropy: logits {lv.shape}, labels {labels.shape}")
    K = lv.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range for {K} classes")
    top = lv.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(lv - top).sum(axis=1))
    rows = np.arange(lv.shape[0])
    loss = np.asarray((lse - lv[rows, labels]).mean(), dtype=lv.dtype)

    def vjp(g):
        p = np.exp(lv - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / lv.shape[0],)

    return _emit(loss, (logits,), vjp)


# ---------------------------------------------------------------------------
# numerical oracles


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar-valued ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def ev(arr):
        val = f(Tensor(arr))
        val = float(val.data) if isinstance(val, Tensor) else float(val)
        if not np.isfinite(val):
            raise NonFiniteError("objective is not finite")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = ev(base)
        flat[i] = orig - h
        fm = ev(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max-norm error relative to the larger of the two max-norms.

    Below ``floor`` the comparison becomes absolute, so identically-zero
    gradients (e.g. a key bias under softmax) do not divide rounding noise by ~0.
    """
    a = np.asarray(_val(analytic), dtype=np.float64)
    n = np.asarray(_val(numeric), dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)
