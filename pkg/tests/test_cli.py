import csv

import numpy as np
import pytest

from uoe import cli
from uoe import decomposition as D
from uoe.decomposition import ConfigError
from uoe.verify import CHECKS

TINY_SETS = ["layers=1", "d=16", "max_len=16", "gate_hidden=4", "steps=3", "log_every=2", "eval_batch=64"]


def sets(*extra):
    out = []
    for s in TINY_SETS + list(extra):
        out += ["--set", s]
    return out


@pytest.fixture
def corpus(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_bytes(b"to be or not to be, that is the question. " * 60)
    return p


class TestConfig:
    def test_parse_text(self):
        rc = cli.parse_config_text("""
            # comment
            d = 32          # trailing comment
            n_a = 2
            gate_scale_outputs = yes
            d_h = none
            lr = 1e-3
            steps = 7
            attn_mode = full
        """)
        assert (rc.model.d, rc.model.n_a, rc.model.lr, rc.steps) == (32, 2, 1e-3, 7)
        assert rc.model.gate_scale_outputs is True and rc.model.d_h is None
        assert rc.model.attn_mode == "full"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="line 2.*colour"):
            cli.parse_config_text("d = 8\ncolour = red\n")

    def test_bad_value_and_line(self):
        with pytest.raises(ConfigError, match="int"):
            cli.parse_config_text("d = eight")
        with pytest.raises(ConfigError, match="key = value"):
            cli.parse_config_text("d 8")
        with pytest.raises(ConfigError):
            cli.parse_config_text("dense = maybe")

    def test_overrides_and_seed(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("d = 32\nseed = 1\n")
        rc = cli.load_run_config(p, ["d=16", "batch=4"], seed=9)
        assert (rc.model.d, rc.batch, rc.model.seed) == (16, 4, 9)

    def test_validation(self):
        with pytest.raises(ConfigError):
            cli.load_run_config(None, ["batch=6", "accum_steps=4"])
        with pytest.raises(ConfigError):
            cli.load_run_config(None, ["steps=0"])
        with pytest.raises(ConfigError):
            cli.load_run_config(None, ["n_a=3"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            cli.load_run_config(tmp_path / "none.cfg")

    def test_shipped_configs_parse(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        for p in sorted(root.glob("*.cfg")):
            cli.load_run_config(p)


class TestVerify:
    def test_all_pass(self, capsys):
        assert cli.main(["verify"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == len(CHECKS)

    def test_filter(self, capsys):
        assert cli.main(["verify", "--filter", "mask"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("[")]
        assert len(lines) == 1 and lines[0].startswith("[PASS] mask")

    def test_unknown_filter(self, capsys):
        assert cli.main(["verify", "--filter", "nope"]) == 2

    def test_partition_off_by_one_fails_lossless_only(self, monkeypatch, capsys):
        real = D.partition_mlp

        def shifted(a1, a2, n, *args, **kw):
            g = real(a1, a2, n, *args, **kw)
            g.a_in.data = np.roll(g.a_in.data, 1, axis=2)  # every slice starts one column late
            return g

        monkeypatch.setattr(D, "partition_mlp", shifted)
        assert cli.main(["verify"]) == 1
        out = capsys.readouterr().out
        failed = [l.split()[1].rstrip(":") for l in out.splitlines() if l.startswith("[FAIL]")]
        assert failed == ["lossless"]
        assert "first failing check: lossless" in out


class TestTrain:
    def test_writes_csv_and_checkpoint(self, tmp_path, corpus):
        out = tmp_path / "run"
        assert cli.main(["train", "--corpus", str(corpus), "--out", str(out), *sets()]) == 0
        rows = list(csv.reader((out / "metrics.csv").open()))
        assert ",".join(rows[0]) == cli.TRAIN_CSV_HEADER
        assert [r[0] for r in rows[1:]] == ["2", "3"]
        assert (out / "final.ckpt").read_bytes()[:4] == b"UOE1"

    def test_deterministic(self, tmp_path, corpus):
        for name in ("a", "b"):
            cli.main(["train", "--corpus", str(corpus), "--out", str(tmp_path / name), "--seed", "4", *sets()])
        for f in ("metrics.csv", "final.ckpt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_bad_config_exit_code(self, tmp_path, corpus, capsys):
        code = cli.main(["train", "--corpus", str(corpus), "--out", str(tmp_path), "--set", "wat=1"])
        assert code == 2 and "unknown config key" in capsys.readouterr().err

    def test_missing_corpus_exit_code(self, tmp_path):
        assert cli.main(["train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path), *sets()]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path, corpus, capsys):
        code = cli.main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "r"), *sets("lr=1e300")])
        assert code == 3 and "diverged" in capsys.readouterr().err

    def test_thread_env(self, monkeypatch, tmp_path, corpus):
        monkeypatch.setenv("UOE_THREADS", "1")
        assert cli.main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "r"), *sets()]) == 0
        monkeypatch.setenv("UOE_THREADS", "zero")
        assert cli.main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "r"), *sets()]) == 2


class TestAblate:
    def test_grid_rows_and_full_rows_match_dense(self, tmp_path, corpus):
        out = tmp_path / "ablate.csv"
        assert cli.main(["ablate", "--corpus", str(corpus), "--out", str(out), *sets("steps=2")]) == 0
        rows = list(csv.DictReader(out.open()))
        assert out.read_text().splitlines()[0] == cli.ABLATE_CSV_HEADER
        assert len(rows) == len(cli.ABLATE_N) * len(cli.ABLATE_R)
        for r in rows:
            if float(r["r"]) == 1.0:
                assert abs(float(r["final_ppl"]) - float(r["dense_ppl"])) <= 1e-6
        assert {int(r["k"]) for r in rows if r["n"] == "8"} == {2, 4, 6, 8}

    def test_cell_k(self):
        base = cli.RunConfig()
        assert cli.ablation_cell(base, 2, 0.25).model.k_attn == 1
        assert cli.ablation_cell(base, 8, 0.75).model.k_mlp == 6


def test_bench_command(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "--grid", "d=16;n=2;l=16", "--out", str(out), "--iters", "2"]) == 0
    assert len(out.read_text().splitlines()) == 4
    assert "x serial" in capsys.readouterr().out


def test_bench_bad_grid(tmp_path):
    assert cli.main(["bench", "--grid", "d=16", "--out", str(tmp_path / "b.csv")]) == 2
