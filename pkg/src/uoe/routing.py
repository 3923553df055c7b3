"""Gating networks, routing planners and the single-gather/single-scatter path.

Two selection paradigms are supported:

* data selection: a sample is cut into ``m`` patches of ``l_p`` tokens; each
  patch picks its top-k experts, the largest per-expert count becomes the
  capacity ``c``, and every expert then takes its ``c`` highest-gated
  patches, re-sorted into sequence order;
* expert selection: each whole sample of a batch goes to its top-k experts.

All index lists for one routed block are encoded into one flat list so the
expert inputs are fetched by a single index-select and the outputs written
back by a single index-add. Ties in every top-k resolve to the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decomposition import ConfigError
from .tensor import Tensor


def topk_indices(values: np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Indices of the ``k`` largest entries along ``axis``, best first.

    A stable sort on the negated values puts the lower index first among ties.
    """
    order = np.argsort(-np.asarray(values), axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


@dataclass
class GateParams:
    """Weights of the routing networks of one block.

    ``w_b`` (d × h_g) and ``w_a`` (h_g × n) form the patch gate; ``w_e`` is the
    sample gate, ``(l·d) × n`` when flattening or ``d × n`` when pooled.
    """

    w_b: Tensor | None = None
    w_a: Tensor | None = None
    w_e: Tensor | None = None
    pooled: bool = False

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("w_b", "w_a", "w_e") if getattr(self, k) is not None}

    @property
    def n(self) -> int:
        w = self.w_a if self.w_a is not None else self.w_e
        return w.shape[-1]


@dataclass
class DataRoutingPlan:
    g: np.ndarray  # n × m gate values (snapshot)
    id_prime: np.ndarray  # m × k stage-1 experts per patch, best first
    c: int
    id: np.ndarray  # E × c sorted patch indices, one row per active expert
    experts: np.ndarray  # the E active experts (all n unless restricted)

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def m(self) -> int:
        return self.g.shape[1]

    @property
    def k(self) -> int:
        return self.id_prime.shape[1]

    @property
    def flat_index(self) -> np.ndarray:
        return self.id.reshape(-1)

    def stage1_counts(self) -> np.ndarray:
        return np.bincount(self.id_prime.reshape(-1), minlength=self.n)

    def selections(self) -> np.ndarray:
        """Boolean ``n × m`` indicator of stage-1 (top-k per patch) picks."""
        sel = np.zeros((self.n, self.m), dtype=bool)
        sel[self.id_prime, np.arange(self.m)[:, None]] = True
        return sel

    def loads(self) -> np.ndarray:
        """Patches actually processed per expert (``c`` for active, 0 otherwise)."""
        out = np.zeros(self.n, dtype=np.int64)
        out[self.experts] = self.c
        return out

    def token_index(self, l_p: int) -> np.ndarray:
        """``E × (c·l_p)`` original token positions of each expert's input."""
        return (self.id[..., None] * l_p + np.arange(l_p)).reshape(self.id.shape[0], -1)

    def fingerprint(self) -> tuple:
        return ("data", self.c, self.id.tobytes(), self.experts.tobytes(), self.id_prime.tobytes())


@dataclass
class ExpertRoutingPlan:
    g: np.ndarray | None  # b × n gate values; None for the ungated full plan
    id_prime: np.ndarray  # b × k
    assignments: list[np.ndarray] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.assignments)

    @property
    def b(self) -> int:
        return self.id_prime.shape[0]

    @property
    def k(self) -> int:
        return self.id_prime.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.array([a.size for a in self.assignments], dtype=np.int64)

    @property
    def flat_samples(self) -> np.ndarray:
        """Uniform encoding: expert 0's samples, then expert 1's, ..."""
        if not self.assignments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.assignments).astype(np.int64)

    @property
    def flat_experts(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.counts)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])

    def selections(self) -> np.ndarray:
        """Boolean ``n × b`` indicator, the transpose of the sample→expert map."""
        sel = np.zeros((self.n, self.b), dtype=bool)
        for i, a in enumerate(self.assignments):
            sel[i, a] = True
        return sel

    def loads(self) -> np.ndarray:
        return self.counts

    def fingerprint(self) -> tuple:
        return ("expert",) + tuple(a.tobytes() for a in self.assignments)


# ---------------------------------------------------------------------------
# patches and gates


def split_patches(x: Tensor, l_p: int) -> Tensor:
    """``l × d`` → ``m × l_p × d`` contiguous, order-preserving patches."""
    l, d = x.shape[-2:]
    if l_p < 1 or l % l_p:
        raise ConfigError(f"sequence length {l} is not divisible by patch length {l_p}")
    return T.reshape(x, x.shape[:-2] + (l // l_p, l_p, d))


def data_gate(x_patches: Tensor, p: GateParams) -> Tensor:
    """Column-normalised patch gates ``n × m``.

    Each patch is mean-pooled over its tokens, mapped ``d → h_g`` by ``w_b``
    and ``h_g → n`` by ``w_a``; the softmax runs over experts.
    """
    if p.w_b is None or p.w_a is None:
        raise ConfigError("data gate weights are missing")
    if x_patches.shape[-1] != p.w_b.shape[0]:
        raise T.ShapeError(f"patches {x_patches.shape} do not match gate input width {p.w_b.shape[0]}")
    pooled = T.mean(x_patches, axis=1)
    logits = T.matmul(T.matmul(pooled, p.w_b), p.w_a)
    return T.softmax(T.transpose(logits, (1, 0)), axis=0)


def expert_gate(x_batch: Tensor, p: GateParams) -> Tensor:
    """Row-normalised sample gates ``b × n``."""
    if p.w_e is None:
        raise ConfigError("expert gate weights are missing")
    b, l, d = x_batch.shape
    if p.pooled:
        flat = T.mean(x_batch, axis=1)
    else:
        if l * d != p.w_e.shape[0]:
            raise ConfigError(
                f"expert gate expects flattened length {p.w_e.shape[0]}, got l·d = {l}·{d}")
        flat = T.reshape(x_batch, (b, l * d))
    return T.softmax(T.matmul(flat, p.w_e), axis=1)


# ---------------------------------------------------------------------------
# planners


def plan_data_selection(g, k: int, experts=None) -> DataRoutingPlan:
    """Two-stage patch routing over the gate matrix ``g`` (``n × m``).

    ``experts`` restricts planning to a subset (combined mode); inactive
    experts take part in neither stage.
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    n, m = g.shape
    active = np.arange(n) if experts is None else np.sort(np.asarray(experts, dtype=np.int64))
    if not 1 <= k <= active.size:
        raise ConfigError(f"k={k} out of range for {active.size} experts")
    sub = g[active]
    stage1 = active[topk_indices(sub, k, axis=0)].T  # m × k
    counts = np.bincount(stage1.reshape(-1), minlength=n)
    c = int(counts[active].max())
    ids = np.sort(topk_indices(sub, c, axis=1), axis=1)
    return DataRoutingPlan(g=g, id_prime=np.ascontiguousarray(stage1), c=c, id=ids, experts=active)


def plan_expert_selection(g, k: int) -> ExpertRoutingPlan:
    """Route each sample (row of ``g``, ``b × n``) to its top-k experts."""
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    b, n = g.shape
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} out of range for {n} experts")
    idp = topk_indices(g, k, axis=1)
    sel = np.zeros((n, b), dtype=bool)
    sel[idp, np.arange(b)[:, None]] = True
    return ExpertRoutingPlan(g=g, id_prime=idp, assignments=[np.flatnonzero(r) for r in sel])


def full_expert_plan(b: int, n: int) -> ExpertRoutingPlan:
    """Every sample to every expert, no gate."""
    idp = np.tile(np.arange(n), (b, 1))
    return ExpertRoutingPlan(g=None, id_prime=idp, assignments=[np.arange(b) for _ in range(n)])


# ---------------------------------------------------------------------------
# gather / scatter


def gather_patches(x_patches: Tensor, plan: DataRoutingPlan) -> Tensor:
    """``m × l_p × d`` → ``E × c × l_p × d`` in one index-select."""
    T.COUNTER.gathers += 1
    out = T.index_select(x_patches, 0, plan.flat_index)
    return T.reshape(out, (plan.id.shape[0], plan.c) + x_patches.shape[1:])


def scatter_add_patches(base: Tensor, y_expert: Tensor, plan: DataRoutingPlan) -> Tensor:
    """Selective residual: add every expert slot back onto its patch of ``base``."""
    T.COUNTER.scatters += 1
    e, c = plan.id.shape
    return T.index_add(base, 0, plan.flat_index, T.reshape(y_expert, (e * c,) + base.shape[1:]))


def gather_samples(x: Tensor, plan: ExpertRoutingPlan) -> Tensor:
    """``b × …`` → ``(Σ c_i) × …`` in one index-select over the flat encoding."""
    T.COUNTER.gathers += 1
    return T.index_select(x, 0, plan.flat_samples)


def scatter_add_samples(base: Tensor, y: Tensor, plan: ExpertRoutingPlan) -> Tensor:
    T.COUNTER.scatters += 1
    return T.index_add(base, 0, plan.flat_samples, y)


def gate_values_data(g: Tensor, plan: DataRoutingPlan) -> Tensor:
    """Differentiable ``E × c`` gate value of every routed (expert, patch) slot."""
    flat = plan.experts[:, None] * plan.m + plan.id
    return T.reshape(T.index_select(T.reshape(g, (-1,)), 0, flat.reshape(-1)), plan.id.shape)


def gate_values_expert(g: Tensor, plan: ExpertRoutingPlan) -> Tensor:
    """Differentiable gate value for every row of the flat sample encoding."""
    n = g.shape[1]
    return T.index_select(T.reshape(g, (-1,)), 0, plan.flat_samples * n + plan.flat_experts)
