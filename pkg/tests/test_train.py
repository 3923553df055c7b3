import math

import numpy as np
import pytest

from uoe import model as M
from uoe import train as TR
from uoe.model import UoeModelConfig

TINY = dict(layers=1, d=16, n_a=2, n_m=2, k_attn=1, k_mlp=1, max_len=16, gate_hidden=8, seed=3)


def windows(c, b=8, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(b, c.max_len + 1))


def params_of(state):
    return {k: p.data.copy() for k, p in state.params.items()}


class TestCorpus:
    def test_bundled_corpus(self):
        data = TR.load_corpus()
        assert 90_000 <= data.size <= 120_000 and data.dtype == np.uint8

    def test_windows_are_shifted_targets(self):
        data = np.arange(50, dtype=np.uint8)
        w = TR.make_windows(data, 8)
        assert w.shape == (6, 9)
        np.testing.assert_array_equal(w[1], np.arange(8, 17))

    def test_split_is_disjoint(self):
        data = np.arange(200, dtype=np.uint8)
        tr, ev = TR.split_windows(data, 4)
        assert tr.max() < 180 <= ev.min()

    def test_too_short(self):
        with pytest.raises(ValueError):
            TR.make_windows(np.zeros(4, dtype=np.uint8), 8)

    def test_missing_and_empty(self, tmp_path):
        with pytest.raises(OSError):
            TR.load_corpus(tmp_path / "nope.txt")
        (tmp_path / "e.txt").write_bytes(b"")
        with pytest.raises(ValueError):
            TR.load_corpus(tmp_path / "e.txt")

    def test_unigram(self):
        assert TR.unigram_perplexity(np.array([1, 2, 3, 4])) == pytest.approx(4.0)
        assert TR.unigram_perplexity(np.array([7, 7, 7])) == pytest.approx(1.0)

    def test_sample_batch_deterministic(self):
        w = np.arange(100).reshape(50, 2)
        a, b = TR.sample_batch(w, 4, 1, 7), TR.sample_batch(w, 4, 1, 7)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, TR.sample_batch(w, 4, 1, 8))


class TestTrainStep:
    def test_zero_lr_leaves_params(self):
        c = UoeModelConfig(**TINY)
        state = TR.init_state(c)
        before = params_of(state)
        TR.train_step(state, windows(c), c, lr=0.0)
        assert all(np.array_equal(before[k], state.params[k].data) for k in before)
        assert state.step == 1

    def test_memorises_repeated_pattern(self):
        c = UoeModelConfig(layers=1, d=32, n_a=2, n_m=2, k_attn=1, k_mlp=1, max_len=32,
                           gate_hidden=8, lr=1e-2, attn_mode="data_selection", mlp_mode="expert_selection")
        pattern = np.frombuffer(b"the quick brown fox jumps over the lazy dog; 0123456789 ABCDEFGH", np.uint8)
        assert pattern.size == 64
        data = np.tile(pattern, 20)
        w = TR.make_windows(data, c.max_len)
        state = TR.init_state(c)
        losses = []
        for step in range(200):
            state, m = TR.train_step(state, TR.sample_batch(w, 8, 0, step), c)
            losses.append(m.nll)
        assert TR.evaluate(state, c, w) < 2.0
        smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
        assert smooth[-1] < smooth[0]

    @pytest.mark.parametrize("modes", [("data_selection", "data_selection"), ("full", "full"),
                                       ("data_selection", "full")])
    def test_accumulation_matches_single_batch(self, modes):
        c = UoeModelConfig(**TINY, attn_mode=modes[0], mlp_mode=modes[1], alpha=0.1, lr=1e-2)
        batch = windows(c, b=8)
        a, b = TR.init_state(c), TR.init_state(c)
        for _ in range(3):
            TR.train_step(a, batch, c)
            TR.train_step(b, batch, c, accum_steps=4)
        diff = max(np.abs(a.params[k].data - b.params[k].data).max() for k in a.params)
        assert diff <= 1e-10

    def test_bad_accumulation(self):
        c = UoeModelConfig(**TINY)
        with pytest.raises(ValueError):
            TR.train_step(TR.init_state(c), windows(c, b=6), c, accum_steps=4)

    def test_nan_raises_with_dump(self):
        c = UoeModelConfig(**TINY)
        state = TR.init_state(c)
        state.params["embed"].data[:] = np.nan
        with pytest.raises(TR.TrainingDiverged) as e:
            TR.train_step(state, windows(c), c)
        assert "block 0" in e.value.dump and "loads" in e.value.dump

    def test_metrics(self):
        c = UoeModelConfig(**TINY)
        _, m = TR.train_step(TR.init_state(c), windows(c), c)
        assert m.ppl == pytest.approx(math.exp(m.nll))
        assert 0 < m.flops_ratio < 1.2 and m.lbal > 0
        assert 0 <= m.expert_load_entropy <= math.log(2) + 1e-12
        _, md = TR.train_step(TR.init_state(c, dense=True), windows(c), c)
        assert (md.flops_ratio, md.expert_load_entropy, md.lbal) == (1.0, 0.0, 0.0)

    def test_full_activation_tracks_dense(self):
        c = UoeModelConfig(**{**TINY, "attn_mode": "full", "mlp_mode": "full"})
        a, b = TR.init_state(c), TR.init_state(c, dense=True)
        for step in range(5):
            batch = windows(c, seed=step)
            _, ma = TR.train_step(a, batch, c)
            _, mb = TR.train_step(b, batch, c)
            assert abs(ma.ppl - mb.ppl) <= 1e-9
        dense = M.dense_arrays_from_uoe(a.params, c)
        assert max(np.abs(dense[k] - b.params[k].data).max() for k in dense) <= 1e-10

    def test_evaluate_is_token_weighted(self):
        c = UoeModelConfig(**TINY)
        state = TR.init_state(c)
        w = windows(c, b=5)
        whole = TR.evaluate(state, c, w, batch=5)
        assert TR.evaluate(state, c, w, batch=2) == pytest.approx(whole, rel=1e-12)
