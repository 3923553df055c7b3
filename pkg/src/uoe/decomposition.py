"""Lossless partition of dense MLP and attention weights into expert slices.

The first MLP layer (and the Q/K/V projections) are split by columns, the
second layer (and the output projection) by rows. Slices are stored stacked
along a leading expert axis so every expert runs in one batched product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid hyperparameter combination (divisibility, ranges, modes)."""


SECOND_ACTIVATIONS = ("identity", "silu")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class MlpExpertGroup:
    a_in: Tensor  # n × d × d_e, column slices of the first layer
    a_out: Tensor  # n × d_e × d, row slices of the second layer
    b_in: Tensor | None = None  # n × 1 × d_e
    b_out: Tensor | None = None  # d, shared; added once after the expert sum

    @property
    def n_m(self) -> int:
        return self.a_in.shape[0]

    @property
    def d(self) -> int:
        return self.a_in.shape[1]

    @property
    def d_e(self) -> int:
        return self.a_in.shape[2]

    def tensors(self) -> dict[str, Tensor]:
        out = {"a_in": self.a_in, "a_out": self.a_out}
        if self.b_in is not None:
            out["b_in"] = self.b_in
        if self.b_out is not None:
            out["b_out"] = self.b_out
        return out


@dataclass
class AttnExpertGroup:
    w_q: Tensor  # n × d × d_h
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # n × d_h × d
    b_q: Tensor | None = None  # n × 1 × d_h
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None  # d, shared

    @property
    def n_a(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_h(self) -> int:
        return self.w_q.shape[2]

    def tensors(self) -> dict[str, Tensor]:
        names = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}


def split_columns(w, n: int) -> np.ndarray:
    """``d × (n·w)`` → ``n × d × w``: slice i holds columns ``[i·w, (i+1)·w)``."""
    w = _arr(w)
    d, width = w.shape
    if n < 1 or width % n:
        raise ConfigError(f"width {width} is not divisible by {n} experts")
    return np.ascontiguousarray(w.reshape(d, n, width // n).transpose(1, 0, 2))


def split_rows(w, n: int) -> np.ndarray:
    """``(n·w) × d`` → ``n × w × d``: slice i holds rows ``[i·w, (i+1)·w)``."""
    w = _arr(w)
    height, d = w.shape
    if n < 1 or height % n:
        raise ConfigError(f"height {height} is not divisible by {n} experts")
    return np.ascontiguousarray(w.reshape(n, height // n, d))


def join_columns(slices) -> np.ndarray:
    s = _arr(slices)
    return np.ascontiguousarray(s.transpose(1, 0, 2).reshape(s.shape[1], -1))


def join_rows(slices) -> np.ndarray:
    s = _arr(slices)
    return np.ascontiguousarray(s.reshape(-1, s.shape[2]))


def partition_mlp(a1, a2, n: int, b1=None, b2=None, requires_grad: bool = False) -> MlpExpertGroup:
    """Split a dense two-layer MLP (``d×D_e``, ``D_e×d``) into ``n`` experts."""
    if _arr(a1).shape[1] != _arr(a2).shape[0]:
        raise ConfigError(f"hidden widths differ: {_arr(a1).shape} vs {_arr(a2).shape}")
    a_in = split_columns(a1, n)
    a_out = split_rows(a2, n)
    b_in = None if b1 is None else split_columns(_arr(b1).reshape(1, -1), n)
    b_out = None if b2 is None else _arr(b2).copy()

    def mk(a):
        return T.Tensor(a, requires_grad=requires_grad)

    return MlpExpertGroup(
        mk(a_in), mk(a_out),
        None if b_in is None else mk(b_in),
        None if b_out is None else mk(b_out),
    )


def reconstruct_mlp(g: MlpExpertGroup) -> tuple[np.ndarray, ...]:
    """Inverse of :func:`partition_mlp`; returns ``(a1, a2, b1, b2)``."""
    b1 = None if g.b_in is None else join_columns(g.b_in).reshape(-1)
    b2 = None if g.b_out is None else g.b_out.data.copy()
    return join_columns(g.a_in), join_rows(g.a_out), b1, b2


def partition_attention(wq, wk, wv, wo, n: int, biases=None, requires_grad: bool = False) -> AttnExpertGroup:
    """Column-split Q/K/V and row-split the output projection, one head per expert.

    ``biases`` is an optional ``(b_q, b_k, b_v, b_o)`` tuple of dense vectors.
    """
    widths = {_arr(w).shape[1] for w in (wq, wk, wv)} | {_arr(wo).shape[0]}
    if len(widths) != 1:
        raise ConfigError(f"projection widths disagree: {sorted(widths)}")

    def mk(a):
        return T.Tensor(a, requires_grad=requires_grad)

    group = AttnExpertGroup(
        mk(split_columns(wq, n)), mk(split_columns(wk, n)),
        mk(split_columns(wv, n)), mk(split_rows(wo, n)),
    )
    if biases is not None:
        bq, bk, bv, bo = biases
        group.b_q = mk(split_columns(_arr(bq).reshape(1, -1), n))
        group.b_k = mk(split_columns(_arr(bk).reshape(1, -1), n))
        group.b_v = mk(split_columns(_arr(bv).reshape(1, -1), n))
        group.b_o = mk(_arr(bo).copy())
    return group


def reconstruct_attention(g: AttnExpertGroup) -> tuple[np.ndarray, ...]:
    """Inverse of :func:`partition_attention`; returns ``(wq, wk, wv, wo)``."""
    return join_columns(g.w_q), join_columns(g.w_k), join_columns(g.w_v), join_rows(g.w_o)


def _second(y: Tensor, activation: str) -> Tensor:
    if activation == "identity":
        return y
    if activation == "silu":
        return T.silu(y)
    raise ConfigError(f"unknown second activation {activation!r}; expected one of {SECOND_ACTIVATIONS}")


def dense_mlp_forward(x: Tensor, a1: Tensor, a2: Tensor, second_activation: str = "identity",
                      b1: Tensor | None = None, b2: Tensor | None = None) -> Tensor:
    """Reference two-layer MLP ``φ₂(SiLU(x·a1 + b1)·a2 + b2)``."""
    h = T.matmul(x, a1)
    if b1 is not None:
        h = h + b1
    y = T.matmul(T.silu(h), a2)
    if b2 is not None:
        y = y + b2
    return _second(y, second_activation)


def expert_union_mlp_forward(x: Tensor, g: MlpExpertGroup, second_activation: str = "identity") -> Tensor:
    """Run every expert on all of ``x`` and sum partial outputs before ``φ₂``.

    ``x`` is ``l × d``. The broadcast to ``n`` copies is an index-select and the
    reduction an index-add, so the whole path is one batched product pair.
    """
    if x.ndim != 2 or x.shape[1] != g.d:
        raise T.ShapeError(f"input {x.shape} does not match expert width {g.d}")
    n, l = g.n_m, x.shape[0]
    xs = T.index_select(T.reshape(x, (1, l, g.d)), 0, [0] * n)
    h = T.matmul(xs, g.a_in)
    if g.b_in is not None:
        h = h + g.b_in
    y = T.matmul(T.silu(h), g.a_out)
    acc = T.zeros((l, g.d), dtype=x.dtype)
    y = T.index_add(acc, 0, np.tile(np.arange(l), n), T.reshape(y, (n * l, g.d)))
    if g.b_out is not None:
        y = y + g.b_out
    return _second(y, second_activation)
