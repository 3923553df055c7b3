"""Byte-level language-model training: corpus windows, Adam, train and eval steps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as T
from .flops import count_uoe
from .model import (
    UoeModelConfig, balance_loss_total, cross_entropy_and_perplexity, dense_forward,
    init_dense_model_params, init_uoe_params, load_entropy, model_forward,
)
from .tensor import Tensor

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
EVAL_FRACTION = 0.1


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes NaN or infinite; carries a gating dump."""

    def __init__(self, step: int, dump: str):
        super().__init__(f"non-finite loss at step {step}\n{dump}")
        self.step = step
        self.dump = dump


@dataclass
class TrainState:
    params: dict[str, Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    dense: bool = False

    @classmethod
    def fresh(cls, params: dict[str, Tensor], seed: int, dense: bool = False) -> TrainState:
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(params, m, v, 0, seed, dense)


def init_state(config: UoeModelConfig, dense: bool = False) -> TrainState:
    params = init_dense_model_params(config) if dense else init_uoe_params(config)
    return TrainState.fresh(params, config.seed, dense)


# ---------------------------------------------------------------------------
# corpus


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("uoe") / "data" / "macbeth.txt"))


def load_corpus(path=None) -> np.ndarray:
    """Raw bytes of a text file as ``uint8``; the bundled play when ``path`` is None."""
    p = bundled_corpus_path() if path is None else Path(path)
    try:
        data = p.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read corpus {p}: {e.strerror or e}") from e
    if not data:
        raise ValueError(f"corpus {p} is empty")
    return np.frombuffer(data, dtype=np.uint8)


def make_windows(data: np.ndarray, l: int) -> np.ndarray:
    """Non-overlapping windows: row ``i`` holds bytes ``[i·l, i·l + l]`` (inputs plus next-byte target)."""
    n = (data.size - 1) // l
    if n < 1:
        raise ValueError(f"corpus of {data.size} bytes is too short for windows of {l}")
    idx = np.arange(n)[:, None] * l + np.arange(l + 1)
    return data[idx].astype(np.int64)


def split_windows(data: np.ndarray, l: int) -> tuple[np.ndarray, np.ndarray]:
    """Train windows from the first 90% of the bytes, eval windows from the rest."""
    cut = int(data.size * (1 - EVAL_FRACTION))
    return make_windows(data[:cut], l), make_windows(data[cut:], l)


def unigram_perplexity(targets: np.ndarray) -> float:
    """``exp`` of the byte entropy of ``targets``: the best context-free predictor."""
    counts = np.bincount(np.asarray(targets).reshape(-1), minlength=256).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(math.exp(-(p * np.log(p)).sum()))


def sample_batch(windows: np.ndarray, batch: int, seed: int, step: int) -> np.ndarray:
    idx = T.Rng(seed).child("batch", step).integers(0, windows.shape[0], size=batch)
    return windows[idx]


# ---------------------------------------------------------------------------
# steps


@dataclass
class StepMetrics:
    step: int
    loss: float
    nll: float
    ppl: float
    lbal: float
    expert_load_entropy: float
    flops_ratio: float
    extra: dict = field(default_factory=dict)


def forward_loss(params: dict[str, Tensor], config: UoeModelConfig, batch: np.ndarray,
                 dense: bool = False):
    """``(loss, nll, ppl, lbal, stats)`` for a batch of windows (``b × (l+1)``)."""
    tokens, targets = batch[:, :-1], batch[:, 1:]
    fwd = dense_forward if dense else model_forward
    logits, stats = fwd(params, config, tokens)
    nll, ppl = cross_entropy_and_perplexity(logits, targets)
    lb = balance_loss_total(stats, config) if stats else None
    loss = nll if lb is None else nll + lb
    return loss, nll, ppl, (0.0 if lb is None else lb.item()), stats


def _gating_dump(stats) -> str:
    lines = []
    for i, st in enumerate(stats):
        for rs in st.routed():
            lines.append(f"block {i} {rs.kind} ({rs.mode}): loads={rs.loads().tolist()}")
            for g, _, _, _ in rs.balance_terms():
                a = g.data
                lines.append(f"  gates min={np.nanmin(a) if np.isfinite(a).any() else 'nan'} "
                             f"nan={int(np.isnan(a).sum())}")
                break
    return "\n".join(lines) or "(no routed blocks)"


def adam_update(state: TrainState, lr: float) -> None:
    state.step += 1
    t = state.step
    c1, c2 = 1 - BETA1 ** t, 1 - BETA2 ** t
    for name, p in state.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)


def train_step(state: TrainState, batch: np.ndarray, config: UoeModelConfig,
               lr: float | None = None, accum_steps: int = 1) -> tuple[TrainState, StepMetrics]:
    """One Adam update on ``NLL + Σ L_Bal``.

    With ``accum_steps > 1`` the batch is cut into equal shards whose gradients
    are summed in shard order; each shard loss is scaled by ``1/accum_steps``.
    """
    lr = config.lr if lr is None else lr
    b = batch.shape[0]
    if accum_steps < 1 or b % accum_steps:
        raise ValueError(f"batch of {b} cannot be split into {accum_steps} shards")
    for p in state.params.values():
        p.grad = None
    shard = b // accum_steps
    tot = {"loss": 0.0, "nll": 0.0, "lbal": 0.0}
    all_stats = []
    for s in range(accum_steps):
        part = batch[s * shard:(s + 1) * shard]
        loss, nll, _, lb, stats = forward_loss(state.params, config, part, state.dense)
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(state.step, _gating_dump(stats))
        T.backward(loss * (1.0 / accum_steps))
        tot["loss"] += loss.item() / accum_steps
        tot["nll"] += nll.item() / accum_steps
        tot["lbal"] += lb / accum_steps
        all_stats.append(stats)
    adam_update(state, lr)
    l = batch.shape[1] - 1
    if state.dense:
        ratio, ent = 1.0, 0.0
    else:
        ratio = _flops_ratio(config, l, all_stats, shard)
        ent = float(np.mean([load_entropy(st) for st in all_stats]))
    return state, StepMetrics(state.step, tot["loss"], tot["nll"], math.exp(tot["nll"]),
                              tot["lbal"], ent, ratio)


def _flops_ratio(config: UoeModelConfig, l: int, all_stats, shard: int) -> float:
    uoe = dense = 0
    for stats in all_stats:
        r = count_uoe(config, l, stats if config.layers else None, batch=shard)
        uoe += r.total
        dense += r.dense_total
    return uoe / dense if dense else 1.0


def evaluate(state: TrainState, config: UoeModelConfig, windows: np.ndarray,
             batch: int = 32) -> float:
    """Perplexity over all ``windows`` (token-weighted), without gradients."""
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, windows.shape[0], batch):
            part = windows[s:s + batch]
            _, nll, _, _, _ = forward_loss(state.params, config, part, state.dense)
            n = part.shape[0] * (part.shape[1] - 1)
            total += nll.item() * n
            count += n
    return float(math.exp(total / count))
