"""Binary checkpoint format for :class:`uoe.train.TrainState`.

Layout (little-endian)::

    "UOE1" | version u32 | count u32 |
    count × (name_len u32 | name utf-8 | ndim u32 | dims u64[ndim] | dtype u8 | raw data) |
    crc32 u32 of everything before it

dtype 0 is float32, 1 is float64. Parameters are stored as ``param/<name>``,
Adam moments as ``adam_m/<name>`` and ``adam_v/<name>``; the step counter,
seed and dense flag as int-valued f64 scalars under ``state/``.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .train import TrainState

MAGIC = b"UOE1"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointFormatError(ValueError):
    pass


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a)
        dt = a.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise TypeError(f"array {name!r} has unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        out.append(struct.pack("<B", _DTYPE_CODES[dt]))
        out.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_arrays(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16:
        raise CheckpointFormatError("truncated checkpoint: header incomplete")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointFormatError("CRC32 mismatch: checkpoint truncated or corrupted")
    pos, end = 12, len(buf) - 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise CheckpointFormatError("truncated checkpoint: record runs past end")
        b = buf[pos:pos + n]
        pos += n
        return b

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (code,) = struct.unpack("<B", take(1))
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name!r}")
        dt = _CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(take(size), dtype=dt).reshape(dims).copy()
    if pos != end:
        raise CheckpointFormatError(f"{end - pos} unexpected trailing bytes")
    return arrays


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name in sorted(state.params):
        out["param/" + name] = state.params[name].data
    for name in sorted(state.m):
        out["adam_m/" + name] = state.m[name]
    for name in sorted(state.v):
        out["adam_v/" + name] = state.v[name]
    out["state/step"] = np.array(state.step, dtype=np.float64)
    out["state/seed"] = np.array(state.seed, dtype=np.float64)
    out["state/dense"] = np.array(float(state.dense), dtype=np.float64)
    return out


def state_from_arrays(arrays: dict[str, np.ndarray]) -> TrainState:
    params, m, v = {}, {}, {}
    for key, a in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "param":
            params[name] = T.param(a)
        elif kind == "adam_m":
            m[name] = a
        elif kind == "adam_v":
            v[name] = a
    for key in ("state/step", "state/seed", "state/dense"):
        if key not in arrays:
            raise CheckpointFormatError(f"checkpoint lacks {key}")
    if set(m) != set(params) or set(v) != set(params):
        raise CheckpointFormatError("optimizer moments do not match parameters")
    return TrainState(params, m, v, int(arrays["state/step"]), int(arrays["state/seed"]),
                      bool(arrays["state/dense"]))


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_bytes(encode_arrays(state_arrays(state)))


def load_checkpoint(path) -> TrainState:
    return state_from_arrays(decode_arrays(Path(path).read_bytes()))
