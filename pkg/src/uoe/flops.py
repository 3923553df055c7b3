"""Analytic FLOP counts for the dense reference and the UoE model.

Convention (shared with the runtime counter in :mod:`uoe.tensor`): 2 FLOPs
per multiply-add of a matrix product, 5 per element of a softmax or layer
norm, 1 per element written by a scatter-add. Bias adds, activations, RoPE,
residual adds and gathers count as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .model import BlockStats, UoeModelConfig

COMPONENTS = ("attn_proj", "attn_scores", "mlp", "gating", "routing", "norm", "head")


@dataclass
class FlopsReport:
    attn_proj: int = 0
    attn_scores: int = 0
    mlp: int = 0
    gating: int = 0
    routing: int = 0
    norm: int = 0
    head: int = 0
    dense_total: int | None = None

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in COMPONENTS)

    @property
    def ratio(self) -> float:
        if not self.dense_total:
            return float("nan")
        return self.total / self.dense_total

    def components(self) -> dict[str, int]:
        return {c: getattr(self, c) for c in COMPONENTS}

    def __add__(self, other: FlopsReport) -> FlopsReport:
        return FlopsReport(**{c: getattr(self, c) + getattr(other, c) for c in COMPONENTS})

    csv_header = ",".join(COMPONENTS + ("total", "dense_total", "ratio"))

    def to_csv_row(self) -> str:
        vals = [str(getattr(self, c)) for c in COMPONENTS] + [str(self.total), str(self.dense_total or 0)]
        return ",".join(vals + [f"{self.ratio:.6f}"])


assert [f.name for f in fields(FlopsReport)][:len(COMPONENTS)] == list(COMPONENTS)


def _norm_and_head(c: UoeModelConfig, l: int, batch: int, include_head: bool) -> FlopsReport:
    r = FlopsReport()
    if c.use_layernorm:
        r.norm = batch * c.layers * 2 * 5 * l * c.d
    if include_head:
        r.head = batch * 2 * l * c.d * c.vocab_size
        if c.use_layernorm:
            r.norm += batch * 5 * l * c.d
    return r


def count_dense(config: UoeModelConfig, l: int | None = None, batch: int = 1,
                include_head: bool = False) -> FlopsReport:
    """FLOPs of the dense reference transformer for ``batch`` samples of length ``l``."""
    c = config
    l = c.max_len if l is None else l
    H, D = c.attn_width, c.mlp_width
    r = _norm_and_head(c, l, batch, include_head)
    per = batch * c.layers
    r.attn_proj = per * (2 * l * c.d * 3 * H + 2 * l * H * c.d)
    r.attn_scores = per * (2 * l * l * H * 2 + 5 * c.n_a * l * l)
    r.mlp = per * 2 * l * c.d * D * 2
    r.dense_total = r.total
    return r


# -- per-expert unit costs ---------------------------------------------------


def _attn_rows(c: UoeModelConfig, rows: int, t: int) -> FlopsReport:
    dh = c.head_dim
    return FlopsReport(
        attn_proj=rows * (2 * t * c.d * dh * 3 + 2 * t * dh * c.d),
        attn_scores=rows * (2 * t * t * dh * 2 + 5 * t * t),
        routing=rows * t * c.d,
    )


def _mlp_rows(c: UoeModelConfig, rows: int, t: int) -> FlopsReport:
    return FlopsReport(mlp=rows * 2 * t * c.d * c.expert_dim * 2, routing=rows * t * c.d)


def _data_gate(c: UoeModelConfig, m: int, n: int) -> int:
    return 2 * m * c.d * c.h_g + 2 * m * c.h_g * n + 5 * n * m


def _expert_gate(c: UoeModelConfig, batch: int, l: int, n: int) -> int:
    fan = c.d if c.pooled_expert_gate else l * c.d
    return 2 * batch * fan * n + 5 * batch * n


def _sub_block(c: UoeModelConfig, kind: str, mode: str, l: int, batch: int, n: int, k: int,
               rs=None) -> FlopsReport:
    rows_fn = _attn_rows if kind == "attn" else _mlp_rows
    m = l // c.l_p
    if mode == "full":
        return rows_fn(c, batch * n, l)
    if mode == "expert_selection":
        rows = batch * k if rs is None else int(rs.plans.counts.sum())
        r = rows_fn(c, rows, l)
        r.gating = _expert_gate(c, batch, l, n)
        return r
    r = FlopsReport()
    if mode == "combined":
        r.gating += _expert_gate(c, batch, l, n)
        if rs is None:
            shapes = [(k, math.ceil(m * c.combined_data_k / k))] * batch
        else:
            shapes = [(pl.id.shape[0], pl.c) for pl in rs.plans[1]]
    else:
        shapes = [(n, math.ceil(m * k / n))] * batch if rs is None else [pl.id.shape for pl in rs.plans]
    for e, cap in shapes:
        r = r + rows_fn(c, e, cap * c.l_p)
        r.gating += _data_gate(c, m, n)
    return r


def count_uoe(config: UoeModelConfig, l: int | None = None, stats: list[BlockStats] | None = None,
              batch: int | None = None, include_head: bool = False) -> FlopsReport:
    """FLOPs of the UoE model.

    With ``stats`` (one :class:`BlockStats` per layer from a forward pass) the
    realised plans are used; otherwise loads are assumed balanced:
    ``c = ⌈m·k/n⌉`` in data mode and ``k`` experts per sample in expert mode.
    """
    c = config
    l = c.max_len if l is None else l
    if batch is None:
        batch = _batch_of(stats) if stats else 1
    r = _norm_and_head(c, l, batch, include_head)
    for i in range(c.layers):
        st = stats[i] if stats else None
        r = r + _sub_block(c, "attn", c.attn_mode, l, batch, c.n_a, c.k_attn, st.attn if st else None)
        r = r + _sub_block(c, "mlp", c.mlp_mode, l, batch, c.n_m, c.k_mlp, st.mlp if st else None)
    base = _norm_and_head(c, l, batch, include_head)
    r.norm, r.head = base.norm, base.head
    r.dense_total = count_dense(c, l, batch, include_head).total
    return r


def _batch_of(stats: list[BlockStats]) -> int:
    rs = stats[0].attn
    if rs.mode in ("full", "expert_selection"):
        return rs.plans.b
    if rs.mode == "combined":
        return rs.plans[0].b
    return len(rs.plans)
