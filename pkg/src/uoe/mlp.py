"""Union-of-MLP-Experts (UoME): the routed, column/row-partitioned MLP block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import routing as R
from . import tensor as T
from .attention import MODES
from .decomposition import ConfigError, MlpExpertGroup, SECOND_ACTIVATIONS
from .tensor import Tensor


@dataclass
class UomeParams:
    experts: MlpExpertGroup
    gate: R.GateParams
    l_p: int = 1
    gate_scale_outputs: bool = False
    second_activation: str = "identity"
    combined_data_k: int = 1

    @property
    def n_m(self) -> int:
        return self.experts.n_m

    @property
    def d_e(self) -> int:
        return self.experts.d_e

    @property
    def d(self) -> int:
        return self.experts.d


def expert_mlp(xs: Tensor, a_in: Tensor, a_out: Tensor, b_in: Tensor | None = None,
               fused: bool = False) -> Tensor:
    """``SiLU(xs·A^I + b) · A^O`` for stacked experts (``E × L × d`` → ``E × L × d``)."""
    if b_in is None:
        h = T.matmul(xs, a_in)
    elif fused:
        h = T.fused_multiply_accumulate(b_in, xs, a_in)
    else:
        h = T.matmul(xs, a_in) + b_in
    return T.matmul(T.silu(h), a_out)


def _weights(g: MlpExpertGroup, rows):
    pick = (lambda t: t) if rows is None else (lambda t: T.index_select(t, 0, rows))
    return pick(g.a_in), pick(g.a_out), None if g.b_in is None else pick(g.b_in)


def _finish(base: Tensor, y: Tensor, scatter, p: UomeParams) -> Tensor:
    """Aggregate expert outputs; ``φ₂`` applies to the summed partials only."""
    if p.second_activation == "identity":
        out = scatter(base, y)
        return out if p.experts.b_out is None else out + p.experts.b_out
    acc = scatter(T.zeros(base.shape, dtype=base.dtype), y)
    if p.experts.b_out is not None:
        acc = acc + p.experts.b_out
    return base + T.silu(acc)


def _data_sample(u: Tensor, base: Tensor, p: UomeParams, k: int, active, fused: bool):
    l, d = u.shape
    patches = R.split_patches(u, p.l_p)
    g = R.data_gate(patches, p.gate)
    plan = R.plan_data_selection(g.data, k, experts=active)
    e = plan.id.shape[0]
    xs = T.reshape(R.gather_patches(patches, plan), (e, plan.c * p.l_p, d))
    y = expert_mlp(xs, *_weights(p.experts, None if e == p.n_m else plan.experts), fused=fused)
    y = T.reshape(y, (e, plan.c, p.l_p, d))
    if p.gate_scale_outputs:
        gv = R.gate_values_data(g, plan)
        y = y * T.reshape(gv, gv.shape + (1, 1))
    out = _finish(R.split_patches(base, p.l_p), y,
                  lambda b_, y_: R.scatter_add_patches(b_, y_, plan), p)
    return T.reshape(out, (l, d)), plan, g


def uome_forward(u: Tensor, p: UomeParams, mode: str = "expert_selection", k: int = 1,
                 base: Tensor | None = None, fused: bool = False):
    """Routed expert MLP with the selective residual.

    ``u`` is ``l × d`` or ``b × l × d``; ``base`` defaults to ``u``. Returns
    ``(h, plans, gates)`` with the same conventions as
    :func:`uoe.attention.smha_forward`.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if p.second_activation not in SECOND_ACTIVATIONS:
        raise ConfigError(f"unknown second activation {p.second_activation!r}")
    squeeze = u.ndim == 2
    if squeeze:
        u = T.reshape(u, (1,) + u.shape)
    base = u if base is None else (T.reshape(base, (1,) + base.shape) if squeeze else base)
    if base.shape != u.shape:
        raise T.ShapeError(f"base {base.shape} does not match input {u.shape}")
    b, l, d = u.shape
    if d != p.d:
        raise T.ShapeError(f"input width {d} does not match experts' {p.d}")

    if mode in ("full", "expert_selection"):
        if mode == "full":
            plan, g = R.full_expert_plan(b, p.n_m), None
        else:
            g = R.expert_gate(u, p.gate)
            plan = R.plan_expert_selection(g.data, k)
        xs = R.gather_samples(u, plan)
        y = expert_mlp(xs, *_weights(p.experts, plan.flat_experts), fused=fused)
        if g is not None and p.gate_scale_outputs:
            gv = R.gate_values_expert(g, plan)
            y = y * T.reshape(gv, gv.shape + (1, 1))
        out = _finish(base, y, lambda b_, y_: R.scatter_add_samples(b_, y_, plan), p)
        plans, gates = plan, g
    else:
        active_sets = [None] * b
        eplan = eg = None
        if mode == "combined":
            eg = R.expert_gate(u, p.gate)
            eplan = R.plan_expert_selection(eg.data, k)
            sel = eplan.selections()
            active_sets = [np.flatnonzero(sel[:, j]) for j in range(b)]
        dk = p.combined_data_k if mode == "combined" else k
        outs, dplans, dgates = [], [], []
        for j in range(b):
            o, pl, gj = _data_sample(T.select(u, j), T.select(base, j), p, dk, active_sets[j], fused)
            outs.append(o)
            dplans.append(pl)
            dgates.append(gj)
        out = T.stack(outs)
        if mode == "combined":
            plans, gates = (eplan, dplans), (eg, dgates)
        else:
            plans, gates = dplans, dgates
    if squeeze:
        out = T.reshape(out, (l, d))
    return out, plans, gates
