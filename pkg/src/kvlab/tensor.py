"""Small numpy-backed tensor engine with a reverse-mode gradient tape.

Every op checks shapes explicitly and refuses to broadcast, except for the
last-dimension gain vector taken by :func:`rmsnorm`. Results are checked for
NaN/Inf after every op and a :class:`NumericError` is raised instead of
letting non-finite values propagate.

Gradients are recorded on a :class:`GradTape`, which must be active while the
forward pass runs::

    with GradTape() as tape:
        loss = tsum(matmul(a, b))
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradTape", "ShapeError", "NumericError", "precision",
    "matmul", "add", "sub", "mul", "scale", "softmax_rows", "rmsnorm",
    "rope_apply", "silu", "reshape", "transpose", "concat", "repeat_heads",
    "embedding", "cross_entropy", "tsum", "mean", "custom_op", "grad_check",
]


class ShapeError(ValueError):
    """Operand extents do not agree."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


_local = threading.local()


def _default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used when building new tensors."""
    prev = _default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    """Dense row-major array with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_default_dtype())
        if not np.isfinite(self.data).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered, append-only record of differentiable ops.

    Only ops with at least one ``requires_grad`` input are recorded. A tape is
    bound to the thread that entered it.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._prev = None

    def __enter__(self) -> "GradTape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op, inputs, out, backward) -> None:
        self.records.append(_Record(op, tuple(inputs), out, backward))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{rec.op}: backward produced {ig.shape} for input {inp.shape}")
                inp.grad = ig if inp.grad is None else inp.grad + ig


def _tape() -> GradTape | None:
    return getattr(_local, "tape", None)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        tape = _tape()
        if tape is not None:
            tape.record(op, inputs, out, backward)
    return out


def custom_op(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    """Register an op defined outside this module (e.g. fake quantization)."""
    return _emit(op, np.asarray(data), inputs, backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a weight shared across the leading axes of ``a``) or
    has exactly the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


# --- normalisation and activations ------------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` is an optional boolean array broadcastable to ``x``; False entries
    get probability zero. Every row must keep at least one True entry.
    """
    xd = x.data
    if xd.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if mask is not None:
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax mask leaves a row with no entries")
        masked = np.where(mask, xd, -np.inf)
        m = masked.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(masked - m), 0.0).astype(xd.dtype, copy=False)
    else:
        # a gap past the float range becomes -inf, whose exp is the exact 0 we want
        with np.errstate(over="ignore"):
            e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", y, (x,), backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Divide each row by its root-mean-square, then scale by ``gain``."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm gain {gain.shape} does not match rows of {x.shape}")
    xd, gd = x.data, gain.data
    eps = xd.dtype.type(eps)
    ms = (xd * xd).mean(axis=-1, keepdims=True) + eps
    if (ms == 0).any():
        raise NumericError("rmsnorm of an all-zero row with eps=0")
    r = 1.0 / np.sqrt(ms)
    n = xd * r
    y = n * gd

    def backward(g):
        dn = g * gd
        dx = r * (dn - n * (dn * n).mean(axis=-1, keepdims=True)) if x.requires_grad else None
        dg = (g * n).reshape(-1, gd.shape[0]).sum(axis=0) if gain.requires_grad else None
        return dx, dg

    return _emit("rmsnorm", y, (x, gain), backward)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _emit("silu", xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def rope_angles(positions, dim: int, base: float = 10000.0, dtype=np.float32):
    """Return (cos, sin) tables of shape [len(positions), dim // 2]."""
    if dim % 2:
        raise ShapeError(f"rotary embedding needs an even dimension, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)
    inv = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = np.outer(pos, inv)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate adjacent pairs ``(2i, 2i+1)`` of the last axis by ``pos * base**(-2i/d)``.

    The sequence axis is axis 0 for 2-D input and axis 1 otherwise
    (``[B, S, d]`` or ``[B, S, H, d]``).
    """
    xd = x.data
    d = xd.shape[-1]
    seq_axis = 0 if xd.ndim == 2 else 1
    if len(positions) != xd.shape[seq_axis]:
        raise ShapeError(f"{len(positions)} positions for sequence extent {xd.shape[seq_axis]}")
    cos, sin = rope_angles(positions, d, base, xd.dtype)
    bshape = [1] * xd.ndim
    bshape[seq_axis] = cos.shape[0]
    bshape[-1] = cos.shape[1]
    cos, sin = cos.reshape(bshape), sin.reshape(bshape)

    def rotate(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = ev * cos - od * s
        out[..., 1::2] = ev * s + od * cos
        return out

    return _emit("rope_apply", rotate(xd, sin), (x,), lambda g: (rotate(g, -sin),))


# --- shape plumbing ---------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    ref = list(xs[0].shape)
    axis = axis % len(ref)
    for t in xs[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:axis] + s[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat along {axis}: {xs[0].shape} vs {t.shape}")
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def repeat_heads(x: Tensor, times: int, axis: int = 2) -> Tensor:
    """Repeat each slice along ``axis`` ``times`` times consecutively (KV head -> query group)."""
    if times == 1:
        return x
    shape = x.shape
    axis = axis % len(shape)

    def backward(g):
        gs = g.reshape(shape[:axis] + (shape[axis], times) + shape[axis + 1:])
        return (gs.sum(axis=axis + 1),)

    return _emit("repeat_heads", np.repeat(x.data, times, axis=axis), (x,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"token id out of range for table of {weight.shape[0]} rows")
    wshape = weight.shape

    def backward(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (gw,)

    return _emit("embedding", weight.data[ids], (weight,), backward)


# --- reductions and losses --------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=x.data.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _emit("mean", np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.data.dtype),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy; ``targets`` indexes the last axis of ``logits``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    z = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(t.size), t]
    loss = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(t.size), t] -= 1.0
        return ((p * (g / t.size)).reshape(logits.shape).astype(logits.data.dtype, copy=False),)

    return _emit("cross_entropy", loss, (logits,), backward)


# --- gradient checking ------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-3) -> float:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Runs in float64 so that the finite-difference error is far below the
    comparison tolerance. Returns the worst error over inputs, normalised as
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`` where
    ``floor = 1e-6 * max(1, |f|)`` absorbs round-off when a gradient is
    identically zero.
    """
    with precision(np.float64):
        xs = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                     requires_grad=True) for x in inputs]
        with GradTape() as tape:
            out = f(*xs)
        tape.backward(out)
        floor = 1e-6 * max(1.0, abs(float(out.data)))
        worst = 0.0
        for x in xs:
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
            numeric = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(*xs).data)
                flat[i] = orig - eps
                lo = float(f(*xs).data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
            denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
            worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0) / denom))
    return worst
