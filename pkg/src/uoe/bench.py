"""Serial vs batched execution of routed experts.

Each grid point ``(d, n, l)`` builds one data-selection attention sub-block
and one data-selection MLP sub-block with ``k = n/2`` and routes a single
sample once. Three strategies then run the expert compute on the same plans:

* ``serial``: a Python loop over experts, one gather/compute/scatter each;
* ``batched``: one gather, stacked products over all experts, one scatter;
* ``fused``: as batched, with bias adds folded into the products.
"""

from __future__ import annotations

import gc
import itertools
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import routing as R
from . import tensor as T
from .attention import RopeConfig, expert_attention, shared_causal_submask
from .decomposition import partition_attention, partition_mlp
from .mlp import expert_mlp
from .tensor import Tensor

STRATEGIES = ("serial", "batched", "fused")
CSV_HEADER = "strategy,d,n,l,mean_ms,p50_ms,peak_bytes_estimate"
DEFAULT_GRID = "d=64;n=2,4,8;l=128,256,512"
WARMUP, ITERS = 5, 20


def parse_grid(spec: str) -> list[tuple[int, int, int]]:
    """``"d=64,128;n=2,4;l=128"`` → the cartesian product of ``(d, n, l)``."""
    vals: dict[str, list[int]] = {}
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        key, sep, rhs = part.partition("=")
        key = key.strip()
        if not sep or key not in ("d", "n", "l"):
            raise ValueError(f"bad grid component {part!r}; expected d=..., n=..., l=...")
        try:
            vals[key] = [int(v) for v in rhs.split(",") if v.strip()]
        except ValueError:
            raise ValueError(f"non-integer value in grid component {part!r}") from None
        if not vals[key] or min(vals[key]) < 1:
            raise ValueError(f"grid component {part!r} needs positive integers")
    missing = {"d", "n", "l"} - set(vals)
    if missing:
        raise ValueError(f"grid lacks {sorted(missing)}")
    for d, n in itertools.product(vals["d"], vals["n"]):
        if d % n:
            raise ValueError(f"d={d} is not divisible by n={n}")
    return list(itertools.product(vals["d"], vals["n"], vals["l"]))


@dataclass
class Workload:
    d: int
    n: int
    l: int
    x: Tensor
    attn: dict[str, Tensor]
    mlp: dict[str, Tensor]
    rope: RopeConfig
    attn_plan: R.DataRoutingPlan
    mlp_plan: R.DataRoutingPlan

    @property
    def k(self) -> int:
        return self.attn_plan.k


def make_workload(d: int, n: int, l: int, seed: int = 0) -> Workload:
    rng = T.Rng(seed).child("bench", d, n, l)
    H, D = d, 4 * d
    w = {k: rng.child(k).normal(s, 0.1) for k, s in (
        ("wq", (d, H)), ("wk", (d, H)), ("wv", (d, H)), ("wo", (H, d)), ("a1", (d, D)), ("a2", (D, d)),
        ("bq", (H,)), ("bk", (H,)), ("bv", (H,)), ("b1", (D,)))}
    ag = partition_attention(w["wq"], w["wk"], w["wv"], w["wo"], n, biases=(w["bq"], w["bk"], w["bv"], None))
    mg = partition_mlp(w["a1"], w["a2"], n, w["b1"], None)
    attn = {k: v for k, v in ag.tensors().items() if v is not None and k != "b_o"}
    mlp = {"a_in": mg.a_in, "a_out": mg.a_out, "b_in": mg.b_in}
    k = max(1, n // 2)
    plans = [R.plan_data_selection(rng.child("gate", s).uniform((n, l), 0.0, 1.0), k) for s in range(2)]
    x = Tensor(rng.child("x").normal((l, d)))
    return Workload(d, n, l, x, attn, mlp, RopeConfig.default(d // n), plans[0], plans[1])


def _attn_batched(wl: Workload, x: Tensor, fused: bool) -> Tensor:
    p = wl.attn_plan
    xs = R.gather_patches(T.reshape(x, (wl.l, 1, wl.d)), p)
    e, c = p.id.shape
    xs = T.reshape(xs, (e, c, wl.d))
    y = expert_attention(xs, wl.attn, p.token_index(1), shared_causal_submask(c), wl.rope, fused)
    return T.reshape(R.scatter_add_patches(T.reshape(x, (wl.l, 1, wl.d)), y, p), (wl.l, wl.d))


def _mlp_batched(wl: Workload, x: Tensor, fused: bool) -> Tensor:
    p = wl.mlp_plan
    e, c = p.id.shape
    xs = T.reshape(R.gather_patches(T.reshape(x, (wl.l, 1, wl.d)), p), (e, c, wl.d))
    y = expert_mlp(xs, wl.mlp["a_in"], wl.mlp["a_out"], wl.mlp["b_in"], fused)
    return T.reshape(R.scatter_add_patches(T.reshape(x, (wl.l, 1, wl.d)), y, p), (wl.l, wl.d))


def _one(t: Tensor, i: int) -> Tensor:
    return T.reshape(T.select(t, i), (1,) + t.shape[1:])


def _attn_serial(wl: Workload, x: Tensor) -> Tensor:
    p = wl.attn_plan
    out = x
    c = p.c
    mask = shared_causal_submask(c)
    for i in range(p.id.shape[0]):
        rows = p.id[i]
        xs = T.reshape(T.index_select(x, 0, rows), (1, c, wl.d))
        w = {k: _one(v, i) for k, v in wl.attn.items()}
        y = expert_attention(xs, w, rows[None, :], mask, wl.rope)
        out = T.index_add(out, 0, rows, T.reshape(y, (c, wl.d)))
    return out


def _mlp_serial(wl: Workload, x: Tensor) -> Tensor:
    p = wl.mlp_plan
    out = x
    for i in range(p.id.shape[0]):
        rows = p.id[i]
        xs = T.reshape(T.index_select(x, 0, rows), (1, rows.size, wl.d))
        y = expert_mlp(xs, _one(wl.mlp["a_in"], i), _one(wl.mlp["a_out"], i), _one(wl.mlp["b_in"], i))
        out = T.index_add(out, 0, rows, T.reshape(y, (rows.size, wl.d)))
    return out


def run_strategy(wl: Workload, strategy: str) -> np.ndarray:
    """Attention then MLP expert compute on the routed sample; returns the output."""
    with T.no_grad():
        if strategy == "serial":
            return _mlp_serial(wl, _attn_serial(wl, wl.x)).data
        if strategy in ("batched", "fused"):
            fused = strategy == "fused"
            return _mlp_batched(wl, _attn_batched(wl, wl.x, fused), fused).data
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def peak_bytes_estimate(wl: Workload, strategy: str) -> int:
    """Bytes of the largest set of simultaneously live expert intermediates."""
    e, c = wl.attn_plan.id.shape
    em, cm = wl.mlp_plan.id.shape
    d, dh, de = wl.d, wl.d // wl.n, 4 * wl.d // wl.n
    if strategy == "serial":
        e = em = 1
    attn = e * c * (2 * d + 3 * dh) + e * c * c
    mlp = em * cm * (2 * d + de)
    return 8 * (wl.l * wl.d + max(attn, mlp))


def check_consistency(wl: Workload, tol: float = 1e-12) -> float:
    """Max abs difference between the strategies; raises if it exceeds ``tol``."""
    ref = run_strategy(wl, "serial")
    worst = 0.0
    for s in STRATEGIES[1:]:
        worst = max(worst, float(np.max(np.abs(run_strategy(wl, s) - ref))))
    if worst > tol:
        raise AssertionError(f"strategies disagree by {worst:.3e} at d={wl.d} n={wl.n} l={wl.l}")
    return worst


@dataclass
class Timing:
    strategy: str
    d: int
    n: int
    l: int
    mean_ms: float
    p50_ms: float
    peak_bytes_estimate: int

    def csv_row(self) -> str:
        return (f"{self.strategy},{self.d},{self.n},{self.l},{self.mean_ms:.4f},"
                f"{self.p50_ms:.4f},{self.peak_bytes_estimate}")


def time_strategies(wl: Workload, strategies=STRATEGIES, warmup: int = WARMUP,
                    iters: int = ITERS) -> list[Timing]:
    """Time the strategies in interleaved rounds so machine drift hits all alike."""
    for _ in range(warmup):
        for s in strategies:
            run_strategy(wl, s)
    times: dict[str, list[float]] = {s: [] for s in strategies}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        _timed_rounds(wl, strategies, iters, times)
    finally:
        if gc_was_enabled:
            gc.enable()
    return [Timing(s, wl.d, wl.n, wl.l, statistics.fmean(times[s]), statistics.median(times[s]),
                   peak_bytes_estimate(wl, s)) for s in strategies]


def _timed_rounds(wl: Workload, strategies, iters: int, times: dict[str, list[float]]) -> None:
    for it in range(iters):
        # rotate the order so no strategy always runs right after another
        for j in range(len(strategies)):
            s = strategies[(it + j) % len(strategies)]
            t0 = time.perf_counter()
            run_strategy(wl, s)
            times[s].append((time.perf_counter() - t0) * 1e3)


def run_bench(grid: list[tuple[int, int, int]], seed: int = 0, warmup: int = WARMUP,
              iters: int = ITERS) -> list[Timing]:
    """Check all strategies agree at each grid point, then time them."""
    out = []
    for d, n, l in grid:
        wl = make_workload(d, n, l, seed)
        check_consistency(wl)
        out.extend(time_strategies(wl, STRATEGIES, warmup, iters))
    return out


def write_csv(rows: list[Timing], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(CSV_HEADER + "\n")
        for r in rows:
            f.write(r.csv_row() + "\n")
