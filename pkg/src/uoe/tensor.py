"""Minimal dense tensor engine with reverse-mode differentiation.

Storage is a contiguous numpy array; every differentiable op records a
closure that maps the output gradient to input gradients. The op set is
deliberately small: exactly what the UoE blocks, the dense reference model
and the training loop need.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.linalg import blas as _blas
from scipy.special import expit

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class IndexBoundsError(IndexError):
    """Raised when an index list points outside an axis."""


# ---------------------------------------------------------------------------
# global switches and instrumentation

_grad_enabled = True
_debug = False


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Check every forward result for NaN/Inf when enabled."""
    global _debug
    _debug = bool(flag)


@dataclass
class OpCounter:
    """Runtime instrumentation shared by all ops.

    ``flops`` uses the same convention as :mod:`uoe.flops`: 2 per
    multiply-add in matrix products, 5 per element for softmax and layer
    norm, 1 per element for scatter-add.
    """

    flops: int = 0
    gathers: int = 0
    scatters: int = 0
    fully_masked_rows: int = 0

    def reset(self) -> None:
        self.flops = self.gathers = self.scatters = self.fully_masked_rows = 0


COUNTER = OpCounter()


@contextlib.contextmanager
def counting() -> Iterator[OpCounter]:
    """Reset the global counter and yield it."""
    COUNTER.reset()
    yield COUNTER


# ---------------------------------------------------------------------------


def _dtype_of(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float64)
    if isinstance(dtype, str):
        return np.dtype(DTYPES[dtype])
    return np.dtype(dtype)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = np.ascontiguousarray(data)
        else:
            arr = np.ascontiguousarray(np.asarray(data, dtype=_dtype_of(dtype)))
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None if not self.requires_grad else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul_batched(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return _result(a.data * s, (a,), lambda g: (g * s,))
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = expit(xd)
    out = xd * sig

    def bw(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def select(x: Tensor, j: int | slice) -> Tensor:
    """``x[j]`` along the leading axis; ``j`` may be a slice."""
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[j] = g
        return (gx,)

    return _result(x.data[j], (x,), bw)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    parts = list(parts)
    return _result(np.stack([p.data for p in parts]), parts, lambda g: tuple(g))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Join tensors along the leading axis."""
    parts = list(parts)
    cuts = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _result(np.concatenate([p.data for p in parts]), parts, lambda g: tuple(np.split(g, cuts)))


# ---------------------------------------------------------------------------
# matrix products


def _check_matmul(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and ba != bb:
        if len(ba) != len(bb) or any(x != y and 1 not in (x, y) for x, y in zip(ba, bb)):
            raise ShapeError(f"batch dimensions not broadcastable: {a.shape} @ {b.shape}")
    return np.broadcast_shapes(ba, bb) + (a.shape[-2], b.shape[-1])


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched product ``out[i] = a[i] @ b[i]``; a batch size of 1 broadcasts."""
    out_shape = _check_matmul(a, b)
    ad, bd = a.data, b.data
    COUNTER.flops += 2 * int(np.prod(out_shape)) * a.shape[-1]

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), bw)


matmul = matmul_batched

_GEMM = {np.dtype(np.float64): _blas.dgemm, np.dtype(np.float32): _blas.sgemm}


def _baddbmm(bias: np.ndarray, a: np.ndarray, b: np.ndarray, out_shape) -> np.ndarray:
    gemm = _GEMM[a.dtype]
    out = np.array(np.broadcast_to(bias, out_shape), dtype=a.dtype, order="C")
    a3 = np.broadcast_to(a, out_shape[:-2] + a.shape[-2:]).reshape(-1, *a.shape[-2:])
    b3 = np.broadcast_to(b, out_shape[:-2] + b.shape[-2:]).reshape(-1, *b.shape[-2:])
    o3 = out.reshape(-1, *out_shape[-2:])
    for i in range(o3.shape[0]):
        # row-major C is column-major C^T = b^T a^T; gemm accumulates into it in place
        ct = o3[i].T
        res = gemm(1.0, b3[i].T, a3[i].T, beta=1.0, c=ct, overwrite_c=1)
        if not np.shares_memory(res, o3):
            o3[i] = res.T
    return out


def fused_multiply_accumulate(bias: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Return ``bias + a @ b`` with the bias copy as the GEMM accumulation target."""
    out_shape = _check_matmul(a, b)
    try:
        np.broadcast_shapes(bias.shape, out_shape)
    except ValueError:
        raise ShapeError(f"bias {bias.shape} does not match product shape {out_shape}") from None
    if np.broadcast_shapes(bias.shape, out_shape) != out_shape:
        raise ShapeError(f"bias {bias.shape} does not match product shape {out_shape}")
    ad, bd = a.data, b.data
    COUNTER.flops += 2 * int(np.prod(out_shape)) * a.shape[-1]
    out = _baddbmm(bias.data, ad, bd, out_shape)
    bshape = bias.shape

    def bw(g):
        return (
            _unbroadcast(g, bshape),
            _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape),
            _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape),
        )

    return _result(out, (bias, a, b), bw)


# ---------------------------------------------------------------------------
# normalisations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    COUNTER.flops += 5 * xd.size

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


_CHUNK_BYTES = 1 << 20


def _masked_softmax_into(y: np.ndarray, xd: np.ndarray, keep: np.ndarray, axis: int) -> int:
    """Write the masked softmax of ``xd`` into ``y``; returns the fully masked row count."""
    np.copyto(y, -np.inf)
    np.copyto(y, xd, where=keep)
    zmax = y.max(axis=axis, keepdims=True)
    dead = np.isneginf(zmax)
    n_dead = int(dead.sum())
    if n_dead:
        zmax[dead] = 0.0
    # exp(-inf) = 0 takes care of the masked entries
    np.subtract(y, zmax, out=y)
    np.exp(y, out=y)
    s = y.sum(axis=axis, keepdims=True)
    if n_dead:
        s[s == 0.0] = 1.0
    y /= s
    return n_dead


def masked_softmax(x: Tensor, mask: np.ndarray | None, axis: int = -1) -> Tensor:
    """Softmax over entries where ``mask`` is True; fully masked rows give zeros."""
    if mask is None:
        return softmax(x, axis)
    xd = x.data
    axis = axis % xd.ndim
    keep = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    y = np.empty_like(xd)
    # large stacks are processed a few leading slices at a time to stay in cache
    step = xd.shape[0] if axis == 0 or xd.ndim < 3 else max(1, _CHUNK_BYTES // max(1, xd[0].nbytes))
    for a in range(0, xd.shape[0], step):
        sl = slice(a, a + step)
        COUNTER.fully_masked_rows += _masked_softmax_into(y[sl], xd[sl], keep[sl], axis)
    COUNTER.flops += 5 * xd.size

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    COUNTER.flops += 5 * xd.size

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# gather / scatter


def _check_index(idx, size: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size:
        bad = idx[(idx < 0) | (idx >= size)]
        if bad.size:
            raise IndexBoundsError(f"index {int(bad[0])} out of range for axis of size {size}")
    return idx


def index_select(x: Tensor, axis: int, idx) -> Tensor:
    """Gather slices of ``x`` along ``axis`` in ``idx`` order; duplicates copy."""
    axis = axis % x.ndim
    idx = _check_index(idx, x.shape[axis])
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        _add_at(gx, axis, idx, g)
        return (gx,)

    return _result(np.take(x.data, idx, axis=axis), (x,), bw)


def _add_at(target: np.ndarray, axis: int, idx: np.ndarray, values: np.ndarray) -> None:
    """``target[idx] += values`` along ``axis`` with duplicate indices summed."""
    if idx.size == 0:
        return
    t = target if axis == 0 else np.moveaxis(target, axis, 0)
    v = values if axis == 0 else np.moveaxis(values, axis, 0)
    order = np.argsort(idx, kind="stable")
    s = idx[order]
    first = np.r_[True, s[1:] != s[:-1]]
    if first.all():
        t[idx] += v
        return
    # rank of each occurrence within its index group; round r adds the r-th
    # occurrences, so every row receives its values in their original order
    pos = np.arange(idx.size)
    rank = np.empty_like(idx)
    rank[order] = pos - np.maximum.accumulate(np.where(first, pos, 0))
    for r in range(int(rank.max()) + 1):
        sel = np.flatnonzero(rank == r)
        t[idx[sel]] += v[sel]


def index_add(base: Tensor, axis: int, idx, values: Tensor) -> Tensor:
    """Return ``base`` with ``values[t]`` added at position ``idx[t]`` along ``axis``."""
    axis = axis % base.ndim
    idx = _check_index(idx, base.shape[axis])
    if values.ndim != base.ndim or values.shape[axis] != idx.size:
        raise ShapeError(f"values {values.shape} do not match {idx.size} indices into {base.shape}")
    if values.shape[:axis] + values.shape[axis + 1:] != base.shape[:axis] + base.shape[axis + 1:]:
        raise ShapeError(f"values {values.shape} incompatible with base {base.shape} outside axis {axis}")
    out = base.data.copy()
    _add_at(out, axis, idx, values.data)
    COUNTER.flops += values.data.size

    def bw(g):
        return g, np.take(g, idx, axis=axis)

    return _result(out, (base, values), bw)


# ---------------------------------------------------------------------------
# rotary embedding


def rope_angles(positions: np.ndarray, rot_dim: int, theta_base: float) -> np.ndarray:
    freqs = theta_base ** (-np.arange(0, rot_dim, 2, dtype=np.float64) / rot_dim)
    return np.asarray(positions, dtype=np.float64)[..., None] * freqs


def apply_rope(x: Tensor, positions, theta_base: float = 10000.0, start: int = 0) -> Tensor:
    """Rotate feature pairs ``(start+2i, start+2i+1)`` by ``pos * theta_base**(-2i/d_r)``.

    Features before ``start`` pass through unchanged. ``positions`` broadcasts
    against ``x.shape[:-1]``.
    """
    d_r = x.shape[-1] - start
    if d_r % 2:
        raise ValueError(f"rotary dimension must be even, got {d_r}")
    if d_r == 0:
        return x
    pos = np.asarray(positions)
    if pos.size and pos.min() < 0:
        raise ValueError("positions must be non-negative")
    ang = rope_angles(pos, d_r, theta_base)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)

    def rotate(arr: np.ndarray, s: np.ndarray) -> np.ndarray:
        out = np.array(np.broadcast_to(arr, np.broadcast_shapes(arr.shape, cos.shape[:-1] + (arr.shape[-1],))))
        ev = out[..., start::2].copy()
        od = out[..., start + 1::2].copy()
        out[..., start::2] = ev * cos - od * s
        out[..., start + 1::2] = ev * s + od * cos
        return out

    shape = x.shape
    return _result(rotate(x.data, sin), (x,), lambda g: (_unbroadcast(rotate(g, -sin), shape),))


# ---------------------------------------------------------------------------
# reverse mode


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# deterministic counter-based RNG


class Rng:
    """Splittable generator built on Philox.

    A child stream is keyed by hashing the seed together with its name path,
    so the values a parameter receives do not depend on initialisation order.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        h = hashlib.blake2b(repr((self.seed, self.path)).encode(), digest_size=16).digest()
        key = int.from_bytes(h, "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *names) -> Rng:
        return Rng(self.seed, self.path + tuple(names))

    def normal(self, shape, std: float = 1.0, dtype="f64") -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(_dtype_of(dtype))

    def uniform(self, shape, low: float = -1.0, high: float = 1.0, dtype="f64") -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(_dtype_of(dtype))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def param(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, dtype="f64", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_dtype_of(dtype)), requires_grad=requires_grad)


def tril(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


__all__ = [
    "Tensor", "Rng", "ShapeError", "IndexBoundsError", "COUNTER", "OpCounter", "counting",
    "no_grad", "set_debug", "add", "sub", "mul", "silu", "sum_", "mean", "reshape", "transpose",
    "swap_last", "select", "stack", "concat", "matmul", "matmul_batched", "fused_multiply_accumulate", "softmax",
    "masked_softmax", "log_softmax", "layer_norm", "index_select", "index_add", "apply_rope",
    "rope_angles", "backward", "param", "zeros", "tril",
]
