"""UoE transformer assembly, the dense reference model and the training losses."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import routing as R
from . import tensor as T
from .attention import MODES, AttentionMask, RopeConfig, SmhaParams, smha_forward
from .decomposition import (
    SECOND_ACTIVATIONS, AttnExpertGroup, ConfigError, MlpExpertGroup, dense_mlp_forward,
    join_columns, join_rows, split_columns, split_rows,
)
from .mlp import UomeParams, uome_forward
from .tensor import Tensor


@dataclass
class UoeModelConfig:
    layers: int = 2
    d: int = 64
    n_a: int = 4
    d_h: int | None = None  # default d // n_a
    n_m: int = 4
    d_e: int | None = None  # default 4·d // n_m
    l_p: int = 1
    k_attn: int = 2
    k_mlp: int = 2
    attn_mode: str = "data_selection"
    mlp_mode: str = "expert_selection"
    vocab_size: int = 256
    max_len: int = 64
    alpha: float = 0.01
    rope_d_qc: int | None = None  # default: about half of d_h rotates
    rope_d_kc: int | None = None
    theta_base: float = 10000.0
    rope_positions: str = "original"
    gate_hidden: int | None = None  # default d
    combined_data_k: int = 1
    seed: int = 0
    dtype: str = "f64"
    lr: float = 3e-4
    init_std: float = 0.02
    gate_scale_outputs: bool = False
    pooled_expert_gate: bool = False
    mlp_second_activation: str = "identity"
    use_layernorm: bool = True
    attn_bias: bool = False
    mlp_bias: bool = False

    # -- derived ----------------------------------------------------------
    @property
    def head_dim(self) -> int:
        return self.d_h if self.d_h is not None else self.d // self.n_a

    @property
    def expert_dim(self) -> int:
        return self.d_e if self.d_e is not None else 4 * self.d // self.n_m

    @property
    def attn_width(self) -> int:
        return self.n_a * self.head_dim

    @property
    def mlp_width(self) -> int:
        return self.n_m * self.expert_dim

    @property
    def h_g(self) -> int:
        return self.gate_hidden if self.gate_hidden is not None else self.d

    @property
    def m(self) -> int:
        return self.max_len // self.l_p

    def rope(self) -> RopeConfig:
        r = RopeConfig.default(self.head_dim, self.theta_base)
        if self.rope_d_qc is not None:
            r.d_qc = self.rope_d_qc
        if self.rope_d_kc is not None:
            r.d_kc = self.rope_d_kc
        r.positions = self.rope_positions
        return r

    def activation_ratio(self, which: str) -> float:
        """Nominal r: k/n for expert modes, k/n as the balanced c/m for data mode."""
        mode, k, n = ((self.attn_mode, self.k_attn, self.n_a) if which == "attn"
                      else (self.mlp_mode, self.k_mlp, self.n_m))
        return 1.0 if mode == "full" else k / n

    def replace(self, **kw) -> UoeModelConfig:
        return dataclasses.replace(self, **kw)

    def validate(self) -> UoeModelConfig:
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        for name in ("d", "n_a", "n_m", "l_p", "vocab_size", "max_len", "k_attn", "k_mlp",
                     "combined_data_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_h is None and self.d % self.n_a:
            raise ConfigError(f"d={self.d} not divisible by n_a={self.n_a}")
        if self.d_e is None and (4 * self.d) % self.n_m:
            raise ConfigError(f"4·d={4 * self.d} not divisible by n_m={self.n_m}")
        if self.max_len % self.l_p:
            raise ConfigError(f"max_len={self.max_len} not divisible by l_p={self.l_p}")
        for mode in (self.attn_mode, self.mlp_mode):
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        if self.k_attn > self.n_a or self.k_mlp > self.n_m:
            raise ConfigError("k must not exceed the expert count")
        if self.combined_data_k > min(self.k_attn, self.k_mlp) and "combined" in (self.attn_mode, self.mlp_mode):
            raise ConfigError("combined_data_k must not exceed the expert-selection k")
        if self.mlp_second_activation not in SECOND_ACTIVATIONS:
            raise ConfigError(f"mlp_second_activation must be one of {SECOND_ACTIVATIONS}")
        if self.dtype not in T.DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(T.DTYPES)}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        self.rope().validate()
        return self


# ---------------------------------------------------------------------------
# parameters


def init_dense_params(config: UoeModelConfig) -> dict[str, np.ndarray]:
    """Dense weights of the reference model; the UoE model partitions these."""
    c = config.validate()
    rng = T.Rng(c.seed).child("init")
    std, dt = c.init_std, c.dtype
    out_std = std / math.sqrt(2 * max(c.layers, 1))
    H, D = c.attn_width, c.mlp_width
    p: dict[str, np.ndarray] = {"embed": rng.child("embed").normal((c.vocab_size, c.d), std, dt)}
    for i in range(c.layers):
        pre = f"blocks.{i}."
        if c.use_layernorm:
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".g"] = np.ones(c.d, dtype=T.DTYPES[dt])
                p[pre + ln + ".b"] = np.zeros(c.d, dtype=T.DTYPES[dt])
        for w in ("w_q", "w_k", "w_v"):
            p[pre + "attn." + w] = rng.child(pre + "attn." + w).normal((c.d, H), std, dt)
        p[pre + "attn.w_o"] = rng.child(pre + "attn.w_o").normal((H, c.d), out_std, dt)
        if c.attn_bias:
            for b_, width in (("b_q", H), ("b_k", H), ("b_v", H), ("b_o", c.d)):
                p[pre + "attn." + b_] = np.zeros(width, dtype=T.DTYPES[dt])
        p[pre + "mlp.a1"] = rng.child(pre + "mlp.a1").normal((c.d, D), std, dt)
        p[pre + "mlp.a2"] = rng.child(pre + "mlp.a2").normal((D, c.d), out_std, dt)
        if c.mlp_bias:
            p[pre + "mlp.b1"] = np.zeros(D, dtype=T.DTYPES[dt])
            p[pre + "mlp.b2"] = np.zeros(c.d, dtype=T.DTYPES[dt])
    if c.use_layernorm:
        p["ln_f.g"] = np.ones(c.d, dtype=T.DTYPES[dt])
        p["ln_f.b"] = np.zeros(c.d, dtype=T.DTYPES[dt])
    p["head"] = rng.child("head").normal((c.d, c.vocab_size), std, dt)
    return p


def _gate_arrays(config: UoeModelConfig, prefix: str, mode: str, n: int) -> dict[str, np.ndarray]:
    c = config
    rng = T.Rng(c.seed).child("init", prefix + "gate")
    out = {}
    if mode in ("data_selection", "combined"):
        out["w_b"] = rng.child("w_b").normal((c.d, c.h_g), 1.0 / math.sqrt(c.d), c.dtype)
        out["w_a"] = rng.child("w_a").normal((c.h_g, n), 1.0 / math.sqrt(c.h_g), c.dtype)
    if mode in ("expert_selection", "combined"):
        fan = c.d if c.pooled_expert_gate else c.max_len * c.d
        out["w_e"] = rng.child("w_e").normal((fan, n), 1.0 / math.sqrt(fan), c.dtype)
    return {prefix + "gate." + k: v for k, v in out.items()}


def uoe_arrays_from_dense(dense: dict[str, np.ndarray], config: UoeModelConfig) -> dict[str, np.ndarray]:
    """Partition dense weights into stacked expert slices and add gate weights."""
    c = config
    out: dict[str, np.ndarray] = {}
    for name, arr in dense.items():
        if ".attn." in name or ".mlp." in name:
            continue
        out[name] = arr.copy()
    for i in range(c.layers):
        pre = f"blocks.{i}."
        a = pre + "attn."
        for w in ("w_q", "w_k", "w_v"):
            out[a + w] = split_columns(dense[a + w], c.n_a)
        out[a + "w_o"] = split_rows(dense[a + "w_o"], c.n_a)
        if c.attn_bias:
            for b_ in ("b_q", "b_k", "b_v"):
                out[a + b_] = split_columns(dense[a + b_].reshape(1, -1), c.n_a)
            out[a + "b_o"] = dense[a + "b_o"].copy()
        out.update(_gate_arrays(c, a, c.attn_mode, c.n_a))
        mm = pre + "mlp."
        out[mm + "a_in"] = split_columns(dense[mm + "a1"], c.n_m)
        out[mm + "a_out"] = split_rows(dense[mm + "a2"], c.n_m)
        if c.mlp_bias:
            out[mm + "b_in"] = split_columns(dense[mm + "b1"].reshape(1, -1), c.n_m)
            out[mm + "b_out"] = dense[mm + "b2"].copy()
        out.update(_gate_arrays(c, mm, c.mlp_mode, c.n_m))
    return out


def dense_arrays_from_uoe(params: dict, config: UoeModelConfig) -> dict[str, np.ndarray]:
    """Reconstruct the dense reference weights from a UoE parameter set."""
    c = config
    arr = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    out: dict[str, np.ndarray] = {}
    for name, a in arr.items():
        if ".attn." in name or ".mlp." in name:
            continue
        out[name] = a.copy()
    for i in range(c.layers):
        a = f"blocks.{i}.attn."
        for w in ("w_q", "w_k", "w_v"):
            out[a + w] = join_columns(arr[a + w])
        out[a + "w_o"] = join_rows(arr[a + "w_o"])
        if c.attn_bias:
            for b_ in ("b_q", "b_k", "b_v"):
                out[a + b_] = join_columns(arr[a + b_]).reshape(-1)
            out[a + "b_o"] = arr[a + "b_o"].copy()
        mm = f"blocks.{i}.mlp."
        out[mm + "a1"] = join_columns(arr[mm + "a_in"])
        out[mm + "a2"] = join_rows(arr[mm + "a_out"])
        if c.mlp_bias:
            out[mm + "b1"] = join_columns(arr[mm + "b_in"]).reshape(-1)
            out[mm + "b2"] = arr[mm + "b_out"].copy()
    return out


def to_params(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: T.param(v.copy()) for k, v in arrays.items()}


def init_uoe_params(config: UoeModelConfig) -> dict[str, Tensor]:
    return to_params(uoe_arrays_from_dense(init_dense_params(config), config))


def init_dense_model_params(config: UoeModelConfig) -> dict[str, Tensor]:
    return to_params(init_dense_params(config))


# ---------------------------------------------------------------------------
# blocks


def smha_params(params: dict[str, Tensor], config: UoeModelConfig, i: int) -> SmhaParams:
    a = f"blocks.{i}.attn."
    g = AttnExpertGroup(params[a + "w_q"], params[a + "w_k"], params[a + "w_v"], params[a + "w_o"],
                        params.get(a + "b_q"), params.get(a + "b_k"), params.get(a + "b_v"),
                        params.get(a + "b_o"))
    gate = R.GateParams(params.get(a + "gate.w_b"), params.get(a + "gate.w_a"),
                        params.get(a + "gate.w_e"), pooled=config.pooled_expert_gate)
    return SmhaParams(g, gate, config.rope(), config.l_p, config.gate_scale_outputs, config.combined_data_k)


def uome_params(params: dict[str, Tensor], config: UoeModelConfig, i: int) -> UomeParams:
    mm = f"blocks.{i}.mlp."
    g = MlpExpertGroup(params[mm + "a_in"], params[mm + "a_out"], params.get(mm + "b_in"),
                       params.get(mm + "b_out"))
    gate = R.GateParams(params.get(mm + "gate.w_b"), params.get(mm + "gate.w_a"),
                        params.get(mm + "gate.w_e"), pooled=config.pooled_expert_gate)
    return UomeParams(g, gate, config.l_p, config.gate_scale_outputs, config.mlp_second_activation,
                      config.combined_data_k)


@dataclass
class RoutedStats:
    """Routing outcome of one sub-block in one forward pass."""

    kind: str  # "attn" or "mlp"
    mode: str
    n: int
    k: int
    plans: object
    gates: object
    tokens_per_sample: int = 0
    l_p: int = 1

    def balance_terms(self, combined_data_k: int = 1):
        """Yield ``(gates n×T, selections n×T, k, weight)`` for the balance loss."""
        if self.mode == "full":
            return
        if self.mode == "expert_selection":
            yield T.transpose(self.gates, (1, 0)), self.plans.selections(), self.k, 1.0
            return
        if self.mode == "combined":
            eplan, dplans = self.plans
            eg, dgates = self.gates
            yield T.transpose(eg, (1, 0)), eplan.selections(), self.k, 1.0
            k = combined_data_k
        else:
            dplans, dgates = self.plans, self.gates
            k = self.k
        for g, pl in zip(dgates, dplans):
            yield g, pl.selections(), k, 1.0 / len(dplans)

    def loads(self) -> np.ndarray:
        """Tokens processed per expert, summed over the batch."""
        if self.mode in ("full", "expert_selection"):
            return self.plans.counts * self.tokens_per_sample
        dplans = self.plans[1] if self.mode == "combined" else self.plans
        return np.sum([pl.loads() * self.l_p for pl in dplans], axis=0)


@dataclass
class BlockStats:
    attn: RoutedStats
    mlp: RoutedStats

    def routed(self):
        return (self.attn, self.mlp)


def _ln(x: Tensor, params: dict[str, Tensor], name: str, config: UoeModelConfig) -> Tensor:
    if not config.use_layernorm:
        return x
    return T.layer_norm(x, params[name + ".g"], params[name + ".b"])


def block_forward(x: Tensor, params: dict[str, Tensor], config: UoeModelConfig, i: int,
                  mask: AttentionMask | None = None, fused: bool = False):
    """One UoE block: pre-norm SMHA then pre-norm UoME; residuals live in the scatter-adds."""
    c = config
    l = x.shape[-2]
    h = _ln(x, params, f"blocks.{i}.ln1", c)
    x1, ap, ag = smha_forward(h, smha_params(params, c, i), mask, c.attn_mode, c.k_attn, base=x, fused=fused)
    h2 = _ln(x1, params, f"blocks.{i}.ln2", c)
    y, mp, mg = uome_forward(h2, uome_params(params, c, i), c.mlp_mode, c.k_mlp, base=x1, fused=fused)
    sa = RoutedStats("attn", c.attn_mode, c.n_a, c.k_attn, ap, ag, l, c.l_p)
    sm = RoutedStats("mlp", c.mlp_mode, c.n_m, c.k_mlp, mp, mg, l, c.l_p)
    return y, BlockStats(sa, sm)


def _embed(params: dict[str, Tensor], tokens: np.ndarray, d: int) -> Tensor:
    tokens = np.asarray(tokens)
    b, l = tokens.shape
    return T.reshape(T.index_select(params["embed"], 0, tokens.reshape(-1)), (b, l, d))


def _head(x: Tensor, params: dict[str, Tensor], config: UoeModelConfig) -> Tensor:
    return T.matmul(_ln(x, params, "ln_f", config), params["head"])


def model_forward(params: dict[str, Tensor], config: UoeModelConfig, tokens: np.ndarray,
                  mask: AttentionMask | None = None, fused: bool = False):
    """Logits ``b × l × V`` and per-block routing stats of the UoE model."""
    x = _embed(params, tokens, config.d)
    stats = []
    for i in range(config.layers):
        x, st = block_forward(x, params, config, i, mask, fused)
        stats.append(st)
    return _head(x, params, config), stats


# ---------------------------------------------------------------------------
# dense reference


def dense_attention(h: Tensor, params: dict[str, Tensor], config: UoeModelConfig, i: int,
                    mask: AttentionMask | None = None) -> Tensor:
    """Standard multi-head attention with partial RoPE (no residual)."""
    c = config
    a = f"blocks.{i}.attn."
    b, l, _ = h.shape
    nh, dh = c.n_a, c.head_dim
    rope = c.rope()

    def heads(name: str) -> Tensor:
        y = T.matmul(h, params[a + name])
        bias = params.get(a + name.replace("w_", "b_"))
        if bias is not None:
            y = y + bias
        return T.transpose(T.reshape(y, (b, l, nh, dh)), (0, 2, 1, 3))

    q, k, v = heads("w_q"), heads("w_k"), heads("w_v")
    pos = np.arange(l)
    q = T.apply_rope(q, pos, rope.theta_base, start=rope.d_qc)
    k = T.apply_rope(k, pos, rope.theta_base, start=rope.d_kc)
    s = T.matmul(q * (1.0 / math.sqrt(dh)), T.swap_last(k))
    mk = T.tril(l) if (mask is None or mask.causal) else np.ones((l, l), dtype=bool)
    if mask is not None and mask.padding is not None:
        pad = np.broadcast_to(np.asarray(mask.padding, dtype=bool).reshape(-1, l), (b, l))
        mk = mk[None, None] & pad[:, None, None, :]
    o = T.matmul(T.masked_softmax(s, mk, axis=-1), v)
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, l, nh * dh))
    y = T.matmul(o, params[a + "w_o"])
    if params.get(a + "b_o") is not None:
        y = y + params[a + "b_o"]
    return y


def dense_block_forward(x: Tensor, params: dict[str, Tensor], config: UoeModelConfig, i: int,
                        mask: AttentionMask | None = None) -> Tensor:
    c = config
    x = x + dense_attention(_ln(x, params, f"blocks.{i}.ln1", c), params, c, i, mask)
    mm = f"blocks.{i}.mlp."
    h = _ln(x, params, f"blocks.{i}.ln2", c)
    return x + dense_mlp_forward(h, params[mm + "a1"], params[mm + "a2"], c.mlp_second_activation,
                                 params.get(mm + "b1"), params.get(mm + "b2"))


def dense_forward(params: dict[str, Tensor], config: UoeModelConfig, tokens: np.ndarray,
                  mask: AttentionMask | None = None):
    x = _embed(params, tokens, config.d)
    for i in range(config.layers):
        x = dense_block_forward(x, params, config, i, mask)
    return _head(x, params, config), []


# ---------------------------------------------------------------------------
# losses


def load_balance_loss(gates, selections, alpha: float, k: int) -> Tensor:
    """Sequence-wise balance loss ``α Σ_i f_i P_i``.

    ``gates`` is ``n × l`` (experts by routed units), ``selections`` the boolean
    top-k indicator of the same shape. ``f_i = n/(k·l) · #selections`` uses hard
    indicators; ``P_i`` is the mean gate and carries the gradient.
    """
    g = gates if isinstance(gates, Tensor) else Tensor(gates)
    n, l = g.shape
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} out of range for {n} experts")
    sel = np.asarray(selections, dtype=bool)
    if sel.shape != (n, l):
        raise T.ShapeError(f"selections {sel.shape} do not match gates {(n, l)}")
    f = (n / (k * l)) * sel.sum(axis=1).astype(g.dtype)
    P = T.mean(g, axis=1)
    return T.sum_(T.mul(P, Tensor(f * alpha, dtype=g.dtype)))


def balance_loss_total(stats: list[BlockStats], config: UoeModelConfig) -> Tensor | None:
    """Sum of balance losses over all routed sub-blocks, batch-averaged for data mode."""
    total = None
    for st in stats:
        for rs in st.routed():
            for g, sel, k, w in rs.balance_terms(config.combined_data_k):
                term = load_balance_loss(g, sel, config.alpha, k) * w
                total = term if total is None else total + term
    return total


def cross_entropy_and_perplexity(logits: Tensor, targets) -> tuple[Tensor, float]:
    """Mean negative log-likelihood and ``exp`` of it."""
    V = logits.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= V):
        raise T.IndexBoundsError(f"target index out of range [0, {V})")
    flat = T.reshape(T.log_softmax(logits, axis=-1), (-1,))
    picked = T.index_select(flat, 0, np.arange(t.size) * V + t)
    nll = T.mean(picked) * -1.0
    return nll, float(math.exp(nll.item()))


def load_entropy(stats: list[BlockStats]) -> float:
    """Mean Shannon entropy (nats) of realised per-expert load over routed sub-blocks."""
    vals = []
    for st in stats:
        for rs in st.routed():
            loads = np.asarray(rs.loads(), dtype=np.float64)
            if loads.sum() <= 0:
                continue
            p = loads / loads.sum()
            p = p[p > 0]
            vals.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(vals)) if vals else 0.0


__all__ = [
    "UoeModelConfig", "init_dense_params", "uoe_arrays_from_dense", "dense_arrays_from_uoe",
    "init_uoe_params", "init_dense_model_params", "to_params", "block_forward", "model_forward",
    "dense_block_forward", "dense_forward", "dense_attention", "load_balance_loss",
    "balance_loss_total", "cross_entropy_and_perplexity", "load_entropy", "BlockStats",
    "RoutedStats", "smha_params", "uome_params",
]
