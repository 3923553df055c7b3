import struct
import zlib

import numpy as np
import pytest

from uoe import checkpoint as C
from uoe import train as TR
from uoe.model import UoeModelConfig, model_forward

CFG = UoeModelConfig(layers=1, d=16, n_a=2, n_m=2, k_attn=1, k_mlp=1, max_len=8, gate_hidden=4, seed=5)


@pytest.fixture
def trained():
    state = TR.init_state(CFG)
    batch = np.random.default_rng(0).integers(0, 256, size=(4, CFG.max_len + 1))
    for _ in range(2):
        TR.train_step(state, batch, CFG)
    return state


def test_round_trip_restores_state(trained, tmp_path):
    C.save_checkpoint(trained, tmp_path / "a.ckpt")
    back = C.load_checkpoint(tmp_path / "a.ckpt")
    assert (back.step, back.seed, back.dense) == (2, 5, False)
    for k in trained.params:
        assert np.array_equal(back.params[k].data, trained.params[k].data)
        assert np.array_equal(back.m[k], trained.m[k]) and np.array_equal(back.v[k], trained.v[k])


def test_save_load_save_identical(trained, tmp_path):
    C.save_checkpoint(trained, tmp_path / "a.ckpt")
    C.save_checkpoint(C.load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_forward_replay(trained, tmp_path):
    tok = np.random.default_rng(1).integers(0, 256, size=(2, CFG.max_len))
    before, _ = model_forward(trained.params, CFG, tok)
    C.save_checkpoint(trained, tmp_path / "a.ckpt")
    after, _ = model_forward(C.load_checkpoint(tmp_path / "a.ckpt").params, CFG, tok)
    assert np.array_equal(before.data, after.data)


def test_training_continues_identically(trained, tmp_path):
    C.save_checkpoint(trained, tmp_path / "a.ckpt")
    back = C.load_checkpoint(tmp_path / "a.ckpt")
    batch = np.random.default_rng(2).integers(0, 256, size=(4, CFG.max_len + 1))
    TR.train_step(trained, batch, CFG)
    TR.train_step(back, batch, CFG)
    for k in trained.params:
        assert np.array_equal(back.params[k].data, trained.params[k].data)


def test_layout():
    buf = C.encode_arrays({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    assert buf[:4] == b"UOE1"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<I", buf, 12) == (2,)
    assert buf[16:18] == b"ab"
    assert struct.unpack_from("<IQQB", buf, 18) == (2, 1, 2, 0)
    assert np.frombuffer(buf[39:47], dtype="<f4").tolist() == [1.0, 2.0]
    assert struct.unpack_from("<I", buf, 47) == (zlib.crc32(buf[:47]),)
    assert len(buf) == 51


def test_scalar_and_f64():
    arrays = {"s": np.array(3.5), "m": np.arange(6.0).reshape(2, 3)}
    back = C.decode_arrays(C.encode_arrays(arrays))
    assert back["s"].shape == () and back["s"] == 3.5
    np.testing.assert_array_equal(back["m"], arrays["m"])


def test_bad_magic(trained):
    buf = bytearray(C.encode_arrays(C.state_arrays(trained)))
    buf[:4] = b"XXXX"
    with pytest.raises(C.CheckpointFormatError, match="magic"):
        C.decode_arrays(bytes(buf))


def test_bad_version():
    body = b"UOE1" + struct.pack("<II", 9, 0)
    with pytest.raises(C.CheckpointFormatError, match="version"):
        C.decode_arrays(body + struct.pack("<I", zlib.crc32(body)))


def test_truncated(trained):
    buf = C.encode_arrays(C.state_arrays(trained))
    for cut in (3, 15, len(buf) // 2, len(buf) - 1):
        with pytest.raises(C.CheckpointFormatError):
            C.decode_arrays(buf[:cut])


def test_flipped_byte_fails_crc(trained):
    buf = bytearray(C.encode_arrays(C.state_arrays(trained)))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(C.CheckpointFormatError, match="CRC"):
        C.decode_arrays(bytes(buf))


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        C.encode_arrays({"i": np.arange(3)})
