"""``uoe`` command line: verify, train, bench, ablate."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .decomposition import ConfigError
from .model import UoeModelConfig

TRAIN_CSV_HEADER = "step,nll,ppl,lbal,expert_load_entropy,flops_ratio,eval_ppl"
ABLATE_CSV_HEADER = "n,r,k,final_ppl,flops_ratio,dense_ppl"
ABLATE_N = (2, 4, 8)
ABLATE_R = (0.25, 0.5, 0.75, 1.0)


@dataclass
class RunConfig:
    """Model fields plus run settings, as read from a ``key = value`` file."""

    model: UoeModelConfig = field(default_factory=UoeModelConfig)
    steps: int = 2000
    batch: int = 8
    log_every: int = 100
    accum_steps: int = 1
    eval_batch: int = 32
    dense: bool = False


RUN_KEYS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "model"}
MODEL_KEYS = {f.name: f for f in dataclasses.fields(UoeModelConfig)}


def _convert(key: str, raw: str, annotation: str):
    raw = raw.strip()
    kinds = [a.strip() for a in str(annotation).split("|")]
    if "None" in kinds and raw.lower() == "none":
        return None
    kind = kinds[0]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def apply_setting(rc: RunConfig, key: str, raw: str) -> None:
    key = key.strip()
    if key in RUN_KEYS:
        setattr(rc, key, _convert(key, raw, RUN_KEYS[key].type))
    elif key in MODEL_KEYS:
        rc.model = dataclasses.replace(rc.model, **{key: _convert(key, raw, MODEL_KEYS[key].type)})
    else:
        raise ConfigError(f"unknown config key {key!r}")


def parse_config_text(text: str, rc: RunConfig | None = None) -> RunConfig:
    rc = rc or RunConfig()
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {no}: expected 'key = value', got {line!r}")
        try:
            apply_setting(rc, key, value)
        except ConfigError as e:
            raise ConfigError(f"line {no}: {e}") from None
    return rc


def load_run_config(path, overrides=(), seed: int | None = None) -> RunConfig:
    rc = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from None
        rc = parse_config_text(text, rc)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        apply_setting(rc, key, value)
    if seed is not None:
        rc.model = rc.model.replace(seed=seed)
    validate_run(rc)
    return rc


def validate_run(rc: RunConfig) -> None:
    rc.model.validate()
    for key in ("steps", "batch", "log_every", "accum_steps", "eval_batch"):
        if getattr(rc, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if rc.batch % rc.accum_steps:
        raise ConfigError(f"batch={rc.batch} is not divisible by accum_steps={rc.accum_steps}")


# ---------------------------------------------------------------------------
# commands


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def train_run(rc: RunConfig, data, out_dir: Path | None = None, log=print) -> dict:
    """Train one model; writes ``metrics.csv`` and ``final.ckpt`` into ``out_dir``."""
    from . import train as TR
    from .checkpoint import save_checkpoint

    c = rc.model
    train_w, eval_w = TR.split_windows(data, c.max_len)
    state = TR.init_state(c, dense=rc.dense)
    rows = [TRAIN_CSV_HEADER]
    last = None
    ratios = []
    for step in range(rc.steps):
        batch = TR.sample_batch(train_w, rc.batch, c.seed, step)
        state, m = TR.train_step(state, batch, c, accum_steps=rc.accum_steps)
        ratios.append(m.flops_ratio)
        if m.step % rc.log_every == 0 or m.step == rc.steps:
            ev = TR.evaluate(state, c, eval_w, rc.eval_batch)
            rows.append(",".join([str(m.step), _fmt(m.nll), _fmt(m.ppl), _fmt(m.lbal),
                                  _fmt(m.expert_load_entropy), _fmt(m.flops_ratio), _fmt(ev)]))
            log(f"step {m.step}: nll {m.nll:.4f} ppl {m.ppl:.3f} eval_ppl {ev:.3f} "
                f"flops_ratio {m.flops_ratio:.3f}")
            last = ev
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        save_checkpoint(state, out_dir / "final.ckpt")
    return {"eval_ppl": last, "flops_ratio": sum(ratios) / len(ratios),
            "unigram_ppl": TR.unigram_perplexity(eval_w[:, 1:]), "rows": rows, "state": state}


def cmd_verify(args) -> int:
    from .verify import run_checks
    names = None if not args.filter else [n.strip() for n in args.filter.split(",") if n.strip()]
    return run_checks(names, args.seed)


def cmd_train(args) -> int:
    from .train import load_corpus
    rc = load_run_config(args.config, args.set, args.seed)
    data = load_corpus(args.corpus)
    out = Path(args.out)
    t0 = time.perf_counter()
    res = train_run(rc, data, out)
    print(f"final eval ppl {res['eval_ppl']:.4f}; unigram baseline {res['unigram_ppl']:.4f}; "
          f"{time.perf_counter() - t0:.1f}s; wrote {out / 'metrics.csv'} and {out / 'final.ckpt'}")
    return 0


def ablation_cell(base: RunConfig, n: int, r: float) -> RunConfig:
    k = max(1, round(r * n))
    m = base.model.replace(n_a=n, n_m=n, k_attn=k, k_mlp=k, d_h=None, d_e=None,
                           combined_data_k=min(base.model.combined_data_k, k))
    return dataclasses.replace(base, model=m, dense=False)


def cmd_ablate(args) -> int:
    from .train import load_corpus
    rc = load_run_config(args.config, args.set, args.seed)
    data = load_corpus(args.corpus)
    lines = [ABLATE_CSV_HEADER]
    for n in ABLATE_N:
        dense_rc = dataclasses.replace(ablation_cell(rc, n, 1.0), dense=True)
        dense_ppl = train_run(dense_rc, data, log=lambda *_: None)["eval_ppl"]
        for r in ABLATE_R:
            cell = ablation_cell(rc, n, r)
            res = train_run(cell, data, log=lambda *_: None)
            lines.append(",".join([str(n), str(r), str(cell.model.k_attn), _fmt(res["eval_ppl"]),
                                   _fmt(res["flops_ratio"]), _fmt(dense_ppl)]))
            print(f"n={n} r={r}: ppl {res['eval_ppl']:.4f} (dense {dense_ppl:.4f}), "
                  f"flops_ratio {res['flops_ratio']:.3f}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    from .bench import parse_grid, run_bench, write_csv
    rows = run_bench(parse_grid(args.grid), seed=args.seed or 0, iters=args.iters)
    write_csv(rows, args.out)
    by = {(t.strategy, t.d, t.n, t.l): t.mean_ms for t in rows}
    for t in rows:
        if t.strategy != "serial":
            ratio = t.mean_ms / by[("serial", t.d, t.n, t.l)]
            print(f"{t.strategy:8s} d={t.d} n={t.n} l={t.l}: {t.mean_ms:.3f} ms ({ratio:.2f}x serial)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uoe", description="Union-of-Experts transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the verification checks")
    v.add_argument("--filter", help="comma-separated check names")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--corpus", help="text file (default: bundled corpus)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    t = sub.add_parser("train", help="train a byte-level language model")
    common(t)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="sweep expert count n and activation ratio r")
    common(a)
    a.add_argument("--out", required=True, help="output CSV file")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="time serial, batched and fused expert execution")
    b.add_argument("--grid", default=None, help='e.g. "d=64;n=2,4,8;l=128,256,512"')
    b.add_argument("--out", required=True, help="output CSV file")
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def _thread_limit():
    env = os.environ.get("UOE_THREADS")
    if not env:
        return contextlib.nullcontext()
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"UOE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("UOE_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench" and args.grid is None:
        from .bench import DEFAULT_GRID
        args.grid = DEFAULT_GRID
    from .train import TrainingDiverged
    try:
        with _thread_limit():
            return args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except (ConfigError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
