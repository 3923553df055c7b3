"""Named verification checks behind ``uoe verify``.

Each check takes a seed and returns ``(ok, detail)``. The oracles here are
written directly in numpy (per-head loops, sorted-key ranking, explicit
masks) so they share no code with the implementation they judge.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import decomposition as D
from . import routing as R
from . import tensor as T
from .attention import RopeConfig, SmhaParams, smha_forward
from .mlp import UomeParams, uome_forward
from .model import (
    UoeModelConfig, balance_loss_total, cross_entropy_and_perplexity, dense_forward,
    init_uoe_params, load_balance_loss, model_forward, to_params, dense_arrays_from_uoe,
)
from .tensor import Tensor

# ---------------------------------------------------------------------------
# numpy oracles


def np_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_rope(x: np.ndarray, positions: np.ndarray, start: int, theta: float = 10000.0) -> np.ndarray:
    """Rotate pairs ``(start+2i, start+2i+1)`` with an explicit 2×2 matrix per pair."""
    out = x.copy()
    d_r = x.shape[-1] - start
    for i in range(d_r // 2):
        a = positions * theta ** (-2 * i / d_r)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])  # 2 × 2 × l
        pair = x[..., start + 2 * i:start + 2 * i + 2]
        out[..., start + 2 * i:start + 2 * i + 2] = np.einsum("abl,lb->la", rot, pair)
    return out


def np_silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def dense_block_oracle(x: np.ndarray, w: dict[str, np.ndarray], n_a: int, rope: RopeConfig,
                       second: str = "identity") -> np.ndarray:
    """Pre-norm transformer block on one ``l × d`` sample, one head at a time."""
    l, d = x.shape
    dh = w["wq"].shape[1] // n_a
    h = np_layer_norm(x, w["g1"], w["b1n"])
    pos = np.arange(l, dtype=np.float64)
    att = np.zeros_like(x)
    causal = np.tril(np.ones((l, l), dtype=bool))
    for i in range(n_a):
        cols = slice(i * dh, (i + 1) * dh)
        q = np_rope(h @ w["wq"][:, cols], pos, rope.d_qc)
        k = np_rope(h @ w["wk"][:, cols], pos, rope.d_kc)
        v = h @ w["wv"][:, cols]
        s = np.where(causal, q @ k.T / math.sqrt(dh), -np.inf)
        p = np.exp(s - s.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        att += (p @ v) @ w["wo"][cols, :]
    x1 = x + att
    y = np_silu(np_layer_norm(x1, w["g2"], w["b2n"]) @ w["a1"]) @ w["a2"]
    return x1 + (np_silu(y) if second == "silu" else y)


def brute_force_data_plan(g: np.ndarray, k: int, experts=None):
    """``(c, rows)`` from the definition: rank by ``(-gate, index)``, capacity = max count."""
    n, m = g.shape
    active = list(range(n)) if experts is None else sorted(int(e) for e in experts)
    counts = {i: 0 for i in active}
    for j in range(m):
        for i in sorted(active, key=lambda i: (-g[i, j], i))[:k]:
            counts[i] += 1
    c = max(counts.values())
    rows = [sorted(sorted(range(m), key=lambda j: (-g[i, j], j))[:c]) for i in active]
    return c, rows


def brute_force_expert_plan(g: np.ndarray, k: int) -> list[list[int]]:
    b, n = g.shape
    out: list[list[int]] = [[] for _ in range(n)]
    for s in range(b):
        for i in sorted(range(n), key=lambda i: (-g[s, i], i))[:k]:
            out[i].append(s)
    return out


# ---------------------------------------------------------------------------
# registry


@dataclass
class Check:
    name: str
    fn: Callable[[int], tuple[bool, str]]
    covers: str


CHECKS: dict[str, Check] = {}


def check(name: str, covers: str):
    def deco(fn):
        CHECKS[name] = Check(name, fn, covers)
        return fn
    return deco


def _dense_block_weights(rng: T.Rng, d: int, H: int, D_: int) -> dict[str, np.ndarray]:
    w = {k: rng.child(k).normal(s, 0.3) for k, s in (
        ("wq", (d, H)), ("wk", (d, H)), ("wv", (d, H)), ("wo", (H, d)), ("a1", (d, D_)), ("a2", (D_, d)))}
    w["g1"], w["b1n"] = 1 + rng.child("g1").normal(d, 0.1), rng.child("b1n").normal(d, 0.1)
    w["g2"], w["b2n"] = 1 + rng.child("g2").normal(d, 0.1), rng.child("b2n").normal(d, 0.1)
    return w


def uoe_full_block(x: np.ndarray, w: dict[str, np.ndarray], n_a: int, n_m: int, rope: RopeConfig,
                   second: str = "identity", dtype="f64") -> np.ndarray:
    """Full-activation UoE block built through the public partition functions."""
    cast = {k: v.astype(T.DTYPES[dtype]) for k, v in w.items()}
    ag = D.partition_attention(cast["wq"], cast["wk"], cast["wv"], cast["wo"], n_a)
    mg = D.partition_mlp(cast["a1"], cast["a2"], n_m)
    d = x.shape[-1]
    gate = R.GateParams()
    sp = SmhaParams(ag, gate, rope)
    mp = UomeParams(mg, gate, second_activation=second)
    xt = Tensor(x.astype(T.DTYPES[dtype]))
    h = T.layer_norm(xt, Tensor(cast["g1"]), Tensor(cast["b1n"]))
    x1, _, _ = smha_forward(h, sp, mode="full", base=xt)
    h2 = T.layer_norm(x1, Tensor(cast["g2"]), Tensor(cast["b2n"]))
    y, _, _ = uome_forward(h2, mp, mode="full", base=x1)
    assert y.shape[-1] == d
    return y.data


@check("lossless", "partition + full activation equals the dense pre-norm block")
def check_lossless(seed: int) -> tuple[bool, str]:
    d, l, H, D_ = 16, 12, 16, 32
    worst64 = worst32 = 0.0
    for n_a, n_m in itertools.product((1, 2, 4, 8), repeat=2):
        rng = T.Rng(seed).child("lossless", n_a, n_m)
        w = _dense_block_weights(rng, d, H, D_)
        x = rng.child("x").normal((l, d))
        rope = RopeConfig.default(H // n_a)
        for second in ("identity", "silu"):
            ref = dense_block_oracle(x, w, n_a, rope, second)
            worst64 = max(worst64, float(np.abs(uoe_full_block(x, w, n_a, n_m, rope, second) - ref).max()))
            y32 = uoe_full_block(x, w, n_a, n_m, rope, second, "f32").astype(np.float64)
            worst32 = max(worst32, float((np.abs(y32 - ref) / np.maximum(np.abs(ref), 1.0)).max()))
    ok = worst64 <= 1e-12 and worst32 <= 1e-5
    return ok, f"f64 max abs {worst64:.2e} (<=1e-12), f32 max rel {worst32:.2e} (<=1e-5)"


@check("model_equivalence", "full-activation model equals the dense reference model")
def check_model_equivalence(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for layers in (1, 2, 4):
        c = UoeModelConfig(layers=layers, d=16, n_a=4, n_m=2, max_len=8, vocab_size=13, seed=seed,
                           attn_mode="full", mlp_mode="full", attn_bias=True, mlp_bias=True)
        p = init_uoe_params(c)
        dense = to_params(dense_arrays_from_uoe(p, c))
        tok = T.Rng(seed).child("tok").integers(0, 13, (3, 8))
        a, _ = model_forward(p, c, tok)
        b, _ = dense_forward(dense, c, tok)
        worst = max(worst, float(np.abs(a.data - b.data).max()))
    return worst <= 1e-10, f"max abs {worst:.2e} over 1, 2, 4 layers (<=1e-10)"


@check("routing", "planners match the brute-force definitions")
def check_routing(seed: int) -> tuple[bool, str]:
    rng = T.Rng(seed).child("routing")
    levels = np.array([0.1, 0.2, 0.3, 0.4])
    cases = 0
    for n, m in itertools.product(range(1, 4), range(1, 6)):
        for k in range(1, n + 1):
            for _ in range(40):
                g = levels[rng.integers(0, 4, (n, m))]
                c, rows = brute_force_data_plan(g, k)
                p = R.plan_data_selection(g, k)
                if p.c != c or p.id.tolist() != rows:
                    return False, f"data plan mismatch for g={g.tolist()}, k={k}"
                ep = R.plan_expert_selection(g.T, k)
                if [a.tolist() for a in ep.assignments] != brute_force_expert_plan(g.T, k):
                    return False, f"expert plan mismatch for g={g.T.tolist()}, k={k}"
                cases += 1
    return True, f"{cases} random grid instances"


@check("mask", "double-indexed causal mask is the leading triangle")
def check_mask(seed: int) -> tuple[bool, str]:
    rng = T.Rng(seed).child("mask")
    for l in (8, 32, 128):
        full = np.tril(np.ones((l, l), dtype=bool))
        for _ in range(100):
            l_a = int(rng.integers(1, l + 1))
            idx = np.sort(rng.permutation(l)[:l_a])
            if not np.array_equal(full[np.ix_(idx, idx)], np.tril(np.ones((l_a, l_a), dtype=bool))):
                return False, f"mismatch at l={l}, idx={idx.tolist()}"
    return True, "300 index sets"


@check("adjoint", "gather and scatter-add are adjoint")
def check_adjoint(seed: int) -> tuple[bool, str]:
    rng = T.Rng(seed).child("adjoint")
    worst = 0.0
    for _ in range(20):
        n, m, k = 4, 10, 2
        g = rng.uniform((n, m), 0.0, 1.0)
        plan = R.plan_data_selection(g, k)
        x = Tensor(rng.normal((m, 3, 5)))
        y = Tensor(rng.normal((n, plan.c, 3, 5)))
        lhs = float((R.gather_patches(x, plan).data * y.data).sum())
        rhs = float((x.data * R.scatter_add_patches(T.zeros(x.shape), y, plan).data).sum())
        worst = max(worst, abs(lhs - rhs))
    return worst <= 1e-12, f"max |<Gx,y> - <x,G*y>| = {worst:.2e}"


@check("load_balance", "balance-loss closed forms")
def check_load_balance(seed: int) -> tuple[bool, str]:
    alpha = 0.01
    worst = 0.0
    for n, l in itertools.product((2, 4, 8), (8, 64)):
        g = np.full((n, l), 1.0 / n)
        for k in range(1, n + 1):
            sel = np.zeros((n, l), dtype=bool)
            sel[R.topk_indices(g, k, axis=0), np.arange(l)] = True
            worst = max(worst, abs(load_balance_loss(g, sel, alpha, k).item() - alpha))
    g = np.zeros((2, 8))
    g[0] = 1.0
    sel = g.astype(bool)
    worst = max(worst, abs(load_balance_loss(g, sel, alpha, 1).item() - 2 * alpha))
    return worst <= 1e-12, f"max deviation {worst:.2e}"


GRAD_MODES = (
    ("full", "full"), ("data_selection", "data_selection"), ("expert_selection", "expert_selection"),
    ("combined", "combined"), ("data_selection", "expert_selection"),
)


def grad_config(attn_mode: str, mlp_mode: str, seed: int) -> UoeModelConfig:
    """The 2-layer micro model used for finite-difference checks."""
    return UoeModelConfig(
        layers=2, d=8, n_a=4, n_m=4, d_e=4, l_p=2, k_attn=2, k_mlp=2, max_len=16, vocab_size=11,
        attn_mode=attn_mode, mlp_mode=mlp_mode, seed=seed, alpha=0.1, attn_bias=True, mlp_bias=True,
        gate_scale_outputs=seed % 2 == 0, mlp_second_activation="silu" if seed % 3 == 0 else "identity",
        combined_data_k=1, init_std=0.3,
    )


def _loss_and_plans(params, c, tok, tgt):
    logits, stats = model_forward(params, c, tok)
    nll, _ = cross_entropy_and_perplexity(logits, tgt)
    lb = balance_loss_total(stats, c)
    loss = nll if lb is None else nll + lb
    return loss, _fingerprint(stats)


def _fingerprint(stats) -> tuple:
    out = []
    for st in stats:
        for rs in st.routed():
            plans = rs.plans
            if isinstance(plans, tuple):
                plans = [plans[0]] + list(plans[1])
            elif not isinstance(plans, list):
                plans = [plans]
            out.extend(p.fingerprint() for p in plans)
    return tuple(out)


def gradient_check(attn_mode: str, mlp_mode: str, seed: int, h: float = 1e-4,
                   floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference directional derivatives.

    One random unit direction per parameter tensor; directions whose
    ``±h`` perturbation changes any routing decision are redrawn, since the
    loss is not differentiable across a routing switch.
    """
    c = grad_config(attn_mode, mlp_mode, seed)
    params = init_uoe_params(c)
    rng = T.Rng(seed).child("gradcheck")
    batch = rng.child("tokens").integers(0, c.vocab_size, (2, c.max_len + 1))
    tok, tgt = batch[:, :-1], batch[:, 1:]
    loss, fp0 = _loss_and_plans(params, c, tok, tgt)
    T.backward(loss)
    worst = 0.0
    for name, p in params.items():
        base = p.data.copy()
        for attempt in range(8):
            u = rng.child(name, attempt).normal(p.shape)
            u /= np.linalg.norm(u)
            with T.no_grad():
                p.data = base + h * u
                lp, fpp = _loss_and_plans(params, c, tok, tgt)
                p.data = base - h * u
                lm, fpm = _loss_and_plans(params, c, tok, tgt)
                p.data = base
            if fpp == fp0 and fpm == fp0:
                break
        else:
            raise RuntimeError(f"could not find a routing-stable direction for {name}")
        fd = (lp.item() - lm.item()) / (2 * h)
        an = float((p.grad * u).sum()) if p.grad is not None else 0.0
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst


@check("gradient", "analytic gradients match central differences in every mode")
def check_gradient(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for am, mm in GRAD_MODES:
        worst = max(worst, gradient_check(am, mm, seed))
    return worst <= 1e-4, f"max relative error {worst:.2e} over {len(GRAD_MODES)} mode pairs (<=1e-4)"


@check("flops", "analytic FLOPs equal the instrumented runtime count")
def check_flops(seed: int) -> tuple[bool, str]:
    from .flops import count_uoe
    worst = 0.0
    for am, mm in GRAD_MODES:
        c = grad_config(am, mm, seed).replace(max_len=32, d=16)
        p = init_uoe_params(c)
        tok = T.Rng(seed).child("flops").integers(0, c.vocab_size, (3, c.max_len))
        with T.no_grad(), T.counting() as ctr:
            _, stats = model_forward(p, c, tok)
        rep = count_uoe(c, c.max_len, stats, include_head=True)
        worst = max(worst, abs(rep.total - ctr.flops) / ctr.flops)
    return worst <= 0.01, f"max relative gap {worst:.2e} (<=1e-2)"


@check("rope", "rotary embedding preserves norms and depends on relative position only")
def check_rope(seed: int) -> tuple[bool, str]:
    rng = T.Rng(seed).child("rope")
    q, k = rng.normal((1, 12)), rng.normal((1, 12))
    worst = 0.0
    dots = []
    for shift in (0, 3, 17):
        rq = T.apply_rope(Tensor(q), np.array([5 + shift]), start=4).data
        rk = T.apply_rope(Tensor(k), np.array([2 + shift]), start=4).data
        worst = max(worst, abs(np.linalg.norm(rq) - np.linalg.norm(q)))
        dots.append(float((rq * rk).sum()))
    worst = max(worst, max(dots) - min(dots))
    return worst <= 1e-12, f"max deviation {worst:.2e}"


@check("checkpoint", "checkpoint round trip is byte-identical")
def check_checkpoint(seed: int) -> tuple[bool, str]:
    from .checkpoint import decode_arrays, encode_arrays, state_arrays, state_from_arrays
    from .train import init_state
    st = init_state(UoeModelConfig(layers=1, d=8, n_a=2, n_m=2, max_len=8, vocab_size=16, seed=seed))
    st.step = 7
    a = encode_arrays(state_arrays(st))
    b = encode_arrays(state_arrays(state_from_arrays(decode_arrays(a))))
    return a == b, f"{len(a)} bytes"


@check("strategies", "serial, batched and fused execution agree")
def check_strategies(seed: int) -> tuple[bool, str]:
    from .bench import check_consistency, make_workload
    worst = 0.0
    for n in (2, 4):
        worst = max(worst, check_consistency(make_workload(16, n, 32, seed)))
    return worst <= 1e-12, f"max abs difference {worst:.2e}"


def run_checks(names=None, seed: int = 0, out=print) -> int:
    """Run the selected checks, print one verdict line each; 0 iff all pass."""
    selected = list(CHECKS) if names is None else list(names)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        out(f"unknown check(s): {', '.join(unknown)}; available: {', '.join(CHECKS)}")
        return 2
    first_fail = None
    for name in selected:
        t0 = time.perf_counter()
        try:
            ok, detail = CHECKS[name].fn(seed)
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
        if not ok and first_fail is None:
            first_fail = name
    if first_fail is not None:
        out(f"verification failed; first failing check: {first_fail}")
        return 1
    out(f"all {len(selected)} checks passed")
    return 0
