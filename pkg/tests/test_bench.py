import numpy as np
import pytest

from uoe import bench as B
from uoe import tensor as T


class TestGrid:
    def test_default(self):
        g = B.parse_grid(B.DEFAULT_GRID)
        assert len(g) == 9 and g[0] == (64, 2, 128) and g[-1] == (64, 8, 512)

    def test_spacing_and_order(self):
        assert B.parse_grid(" l=4 ; d=8,16 ; n=2 ") == [(8, 2, 4), (16, 2, 4)]

    @pytest.mark.parametrize("spec", ["d=64;n=2", "d=64;n=2;l=x", "d=64;n=3;l=8", "q=1;d=2;n=2;l=2",
                                      "d=64;n=2;l=0", "d=64;n=2;l="])
    def test_errors(self, spec):
        with pytest.raises(ValueError):
            B.parse_grid(spec)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_strategies_agree(n):
    wl = B.make_workload(32, n, 64, seed=n)
    assert B.check_consistency(wl) <= 1e-12


def test_disagreement_is_reported(monkeypatch):
    wl = B.make_workload(16, 2, 16)
    real = B.run_strategy
    monkeypatch.setattr(B, "run_strategy", lambda w, s: real(w, s) + (s == "fused") * 1e-6)
    with pytest.raises(AssertionError, match="disagree"):
        B.check_consistency(wl)


def test_batched_uses_one_gather_and_scatter_per_sub_block():
    wl = B.make_workload(16, 4, 32)
    with T.counting() as c:
        B.run_strategy(wl, "batched")
    assert (c.gathers, c.scatters) == (2, 2)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        B.run_strategy(B.make_workload(8, 2, 8), "threaded")


def test_peak_bytes_batched_exceeds_serial():
    wl = B.make_workload(32, 4, 64)
    assert B.peak_bytes_estimate(wl, "batched") > B.peak_bytes_estimate(wl, "serial") > 0


def test_runtime_grows_with_length():
    # 16x the length is about 10x the time; a small gap drowns in per-expert overhead
    rows = B.run_bench(B.parse_grid("d=32;n=4;l=64,1024"), warmup=1, iters=5)
    by = {(r.strategy, r.l): r.p50_ms for r in rows}
    for s in B.STRATEGIES:
        assert by[(s, 1024)] > 2 * by[(s, 64)]


def test_csv(tmp_path):
    rows = B.run_bench([(16, 2, 16)], warmup=0, iters=2)
    B.write_csv(rows, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == B.CSV_HEADER
    assert [l.split(",")[0] for l in lines[1:]] == list(B.STRATEGIES)
    assert all(len(l.split(",")) == 7 for l in lines)
    assert np.isfinite([float(l.split(",")[4]) for l in lines[1:]]).all()
