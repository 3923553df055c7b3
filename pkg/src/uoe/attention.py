"""Selective Multi-Head Attention (SMHA).

Every head is an expert owning a column slice of ``W^q``, ``W^k``, ``W^v``
and a row slice of ``W^o``. Routed tokens (data selection) or routed samples
(expert selection) are gathered once, projected with one batched product per
projection, attended with a shared causal mask, projected back and
scatter-added onto the residual stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import routing as R
from . import tensor as T
from .decomposition import AttnExpertGroup, ConfigError
from .tensor import Tensor

MODES = ("full", "data_selection", "expert_selection", "combined")
SCORE_BLOCK_BYTES = 1 << 20


@dataclass
class RopeConfig:
    d_qc: int  # query features left unrotated (leading part)
    d_kc: int
    d_h: int
    theta_base: float = 10000.0
    positions: str = "original"  # or "compacted"

    @property
    def d_qr(self) -> int:
        return self.d_h - self.d_qc

    @property
    def d_kr(self) -> int:
        return self.d_h - self.d_kc

    @classmethod
    def default(cls, d_h: int, theta_base: float = 10000.0) -> RopeConfig:
        # about half of each head rotates; the rotated part must be even
        d_r = d_h // 2 - (d_h // 2) % 2
        return cls(d_qc=d_h - d_r, d_kc=d_h - d_r, d_h=d_h, theta_base=theta_base)

    def validate(self) -> None:
        for name, c in (("d_qc", self.d_qc), ("d_kc", self.d_kc)):
            if not 0 <= c <= self.d_h:
                raise ConfigError(f"{name}={c} outside [0, {self.d_h}]")
            if (self.d_h - c) % 2:
                raise ConfigError(f"rotated width d_h - {name} = {self.d_h - c} must be even")
        if self.positions not in ("original", "compacted"):
            raise ConfigError(f"unknown RoPE position mode {self.positions!r}")


@dataclass
class AttentionMask:
    """``padding`` marks valid tokens with True; ``causal`` enables the triangle."""

    padding: np.ndarray | None = None
    causal: bool = True


@dataclass
class SmhaParams:
    experts: AttnExpertGroup
    gate: R.GateParams
    rope: RopeConfig
    l_p: int = 1
    gate_scale_outputs: bool = False
    combined_data_k: int = 1

    @property
    def n_a(self) -> int:
        return self.experts.n_a

    @property
    def d_h(self) -> int:
        return self.experts.d_h

    @property
    def d(self) -> int:
        return self.experts.d


# ---------------------------------------------------------------------------
# masks


def shared_causal_submask(l_a: int) -> np.ndarray:
    """Causal mask shared by all experts: the leading ``l_a × l_a`` block of tril(l)."""
    if l_a < 1:
        raise ValueError("l_a must be at least 1")
    return T.tril(l_a)


def select_padding_mask(mask, plan: R.DataRoutingPlan, l_p: int) -> np.ndarray:
    """Gather the padding mask at every expert's selected tokens (``E × c·l_p``)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != plan.m * l_p:
        raise ConfigError(f"padding mask length {mask.shape[-1]} != m·l_p = {plan.m}·{l_p}")
    return mask[..., plan.token_index(l_p)]


# ---------------------------------------------------------------------------
# core computation


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """``softmax(q kᵀ/√d_h) v`` over unmasked keys; fully masked queries give 0."""
    if not (q.shape[:-1] == k.shape[:-1] == v.shape[:-1] and q.shape[-1] == k.shape[-1]):
        raise T.ShapeError(f"attention shapes differ: q {q.shape}, k {k.shape}, v {v.shape}")
    q = q * (1.0 / math.sqrt(q.shape[-1]))
    per = q.shape[-2] * k.shape[-2] * q.dtype.itemsize * int(np.prod(q.shape[1:-2], dtype=np.int64))
    step = max(1, SCORE_BLOCK_BYTES // max(per, 1))
    if q.ndim < 3 or step >= q.shape[0]:
        return _attend(q, k, v, mask)
    # large stacks of score matrices are built a few experts at a time so
    # each block stays in cache; gather and scatter remain single operations
    mask = None if mask is None else np.broadcast_to(mask, q.shape[:-1] + (k.shape[-2],))
    outs = []
    for a in range(0, q.shape[0], step):
        sl = slice(a, a + step)
        outs.append(_attend(T.select(q, sl), T.select(k, sl), T.select(v, sl),
                            None if mask is None else mask[sl]))
    return T.concat(outs)


def _attend(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    s = T.matmul(q, T.swap_last(k))
    return T.matmul(T.masked_softmax(s, mask, axis=-1), v)


def _project(x: Tensor, w: Tensor, bias: Tensor | None, fused: bool) -> Tensor:
    if bias is None:
        return T.matmul(x, w)
    if fused:
        return T.fused_multiply_accumulate(bias, x, w)
    return T.matmul(x, w) + bias


def expert_attention(xs: Tensor, w: dict[str, Tensor], positions: np.ndarray, mask,
                     rope: RopeConfig, fused: bool = False) -> Tensor:
    """Attention of ``E`` experts on their gathered inputs ``xs`` (``E × L × d``).

    ``w`` maps ``w_q``/``w_k``/``w_v`` (``E × d × d_h``), ``w_o`` (``E × d_h × d``)
    and optional ``b_q``/``b_k``/``b_v`` to per-expert tensors. Returns the
    projected outputs ``E × L × d`` without the shared output bias.
    """
    q = _project(xs, w["w_q"], w.get("b_q"), fused)
    k = _project(xs, w["w_k"], w.get("b_k"), fused)
    v = _project(xs, w["w_v"], w.get("b_v"), fused)
    q = T.apply_rope(q, positions, rope.theta_base, start=rope.d_qc)
    k = T.apply_rope(k, positions, rope.theta_base, start=rope.d_kc)
    o = scaled_dot_attention(q, k, v, mask)
    return T.matmul(o, w["w_o"])


def _expert_weights(g: AttnExpertGroup, rows: np.ndarray | None) -> dict[str, Tensor]:
    out = {}
    for name, t in g.tensors().items():
        if name == "b_o":
            continue
        out[name] = t if rows is None else T.index_select(t, 0, rows)
    return out


def _scale_by_gate(y: Tensor, gv: Tensor) -> Tensor:
    return y * T.reshape(gv, gv.shape + (1,) * (y.ndim - gv.ndim))


# ---------------------------------------------------------------------------
# routed forward paths


def _data_sample(h: Tensor, base: Tensor, p: SmhaParams, pad, causal: bool, k: int,
                 active, fused: bool):
    l, d = h.shape
    patches = R.split_patches(h, p.l_p)
    g = R.data_gate(patches, p.gate)
    plan = R.plan_data_selection(g.data, k, experts=active)
    e, l_a = plan.id.shape[0], plan.c * p.l_p
    xs = T.reshape(R.gather_patches(patches, plan), (e, l_a, d))
    tok = plan.token_index(p.l_p)
    positions = tok if p.rope.positions == "original" else np.broadcast_to(np.arange(l_a), (e, l_a))
    mask = shared_causal_submask(l_a) if causal else np.ones((l_a, l_a), dtype=bool)
    if pad is not None:
        mask = mask[None] & select_padding_mask(pad, plan, p.l_p)[:, None, :]
    rows = None if e == p.n_a else plan.experts
    y = expert_attention(xs, _expert_weights(p.experts, rows), positions, mask, p.rope, fused)
    y = T.reshape(y, (e, plan.c, p.l_p, d))
    if p.gate_scale_outputs:
        y = _scale_by_gate(y, R.gate_values_data(g, plan))
    u = R.scatter_add_patches(R.split_patches(base, p.l_p), y, plan)
    return T.reshape(u, (l, d)), plan, g


def _expert_batch(h: Tensor, base: Tensor, p: SmhaParams, pad, causal: bool, plan, g, fused: bool):
    b, l, d = h.shape
    xs = R.gather_samples(h, plan)
    rows = plan.flat_experts
    mask = T.tril(l) if causal else np.ones((l, l), dtype=bool)
    if pad is not None:
        mask = mask[None] & np.asarray(pad, dtype=bool)[plan.flat_samples][:, None, :]
    y = expert_attention(xs, _expert_weights(p.experts, rows), np.arange(l), mask, p.rope, fused)
    if g is not None and p.gate_scale_outputs:
        y = _scale_by_gate(y, R.gate_values_expert(g, plan))
    return R.scatter_add_samples(base, y, plan)


def smha_forward(h: Tensor, p: SmhaParams, mask: AttentionMask | None = None,
                 mode: str = "data_selection", k: int = 1, base: Tensor | None = None,
                 fused: bool = False):
    """Selective multi-head attention with the selective residual.

    ``h`` is ``l × d`` or ``b × l × d``; ``base`` (default ``h``) is what the
    expert outputs are scatter-added onto, so pre-norm blocks pass the raw
    residual stream here and the normalised input as ``h``.

    Returns ``(u, plans, gates)``. For data selection ``plans``/``gates`` are
    per-sample lists; for expert selection a single plan and ``b × n`` gates;
    for combined mode a pair ``(expert_plan, [data_plans])`` with matching gates.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    squeeze = h.ndim == 2
    if squeeze:
        h = T.reshape(h, (1,) + h.shape)
    base = h if base is None else (T.reshape(base, (1,) + base.shape) if squeeze else base)
    if base.shape != h.shape:
        raise T.ShapeError(f"base {base.shape} does not match input {h.shape}")
    b, l, d = h.shape
    if d != p.d:
        raise T.ShapeError(f"input width {d} does not match experts' {p.d}")
    mask = mask or AttentionMask()
    pad = None if mask.padding is None else np.asarray(mask.padding, dtype=bool).reshape(-1, l)
    if pad is not None and pad.shape[0] == 1 and b > 1:
        pad = np.broadcast_to(pad, (b, l))

    if mode in ("full", "expert_selection"):
        if mode == "full":
            plan, g = R.full_expert_plan(b, p.n_a), None
        else:
            g = R.expert_gate(h, p.gate)
            plan = R.plan_expert_selection(g.data, k)
        u = _expert_batch(h, base, p, pad, mask.causal, plan, g, fused)
        plans, gates = plan, g
    else:
        active_sets = [None] * b
        eplan = eg = None
        if mode == "combined":
            eg = R.expert_gate(h, p.gate)
            eplan = R.plan_expert_selection(eg.data, k)
            sel = eplan.selections()
            active_sets = [np.flatnonzero(sel[:, j]) for j in range(b)]
        dk = p.combined_data_k if mode == "combined" else k
        outs, dplans, dgates = [], [], []
        for j in range(b):
            u_j, plan_j, g_j = _data_sample(
                T.select(h, j), T.select(base, j), p, None if pad is None else pad[j],
                mask.causal, dk, active_sets[j], fused)
            outs.append(u_j)
            dplans.append(plan_j)
            dgates.append(g_j)
        u = T.stack(outs)
        if mode == "combined":
            plans, gates = (eplan, dplans), (eg, dgates)
        else:
            plans, gates = dplans, dgates
    if p.experts.b_o is not None:
        u = u + p.experts.b_o
    if squeeze:
        u = T.reshape(u, (l, d))
    return u, plans, gates
