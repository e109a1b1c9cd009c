"""EMOC model checkpoints.

Layout (all integers little-endian)::

    "EMOC" | u16 version | u32 config length | config JSON (utf-8)
    per tensor: u16 name length | name (utf-8) | u8 rank | rank x u32 dims
                | u8 dtype tag (0 = float32, 1 = float64) | raw little-endian data

The config JSON holds the model config, the tensor count and provenance.
Tensors are written in ``state_dict`` order: parameters, then buffers.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict

import numpy as np

from .exceptions import CheckpointShapeError, ConfigError, FileFormatError, TruncatedFileError, VersionMismatchError
from .io_utils import atomic_write_bytes
from .network import MicroEnvNet, ModelConfig

EMOC_MAGIC = b"EMOC"
EMOC_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_checkpoint(model: MicroEnvNet, provenance: dict | None = None) -> bytes:
    state = model.state_dict()
    header = {
        "model_config": model.config.to_dict(),
        "n_tensors": len(state),
        "provenance": dict(provenance or {}),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(EMOC_MAGIC + struct.pack("<HI", EMOC_VERSION, len(raw)) + raw)
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)) + key)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", _TAGS[arr.dtype]))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    return buf.getvalue()


def _take(stream, n, what):
    data = stream.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"truncated checkpoint while reading {what}")
    return data


def decode_checkpoint(data: bytes) -> tuple[MicroEnvNet, dict]:
    """Rebuild the model; returns ``(model, header)``. Nothing is returned on error."""
    stream = io.BytesIO(data)
    magic = stream.read(4)
    if magic != EMOC_MAGIC:
        raise FileFormatError(f"not a checkpoint (magic {magic!r})")
    version, cfg_len = struct.unpack("<HI", _take(stream, 6, "header"))
    if version != EMOC_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {EMOC_VERSION}")
    try:
        header = json.loads(_take(stream, cfg_len, "config").decode("utf-8"))
        config = ModelConfig.from_dict(header["model_config"])
        n_tensors = int(header["n_tensors"])
    except TruncatedFileError:
        raise
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FileFormatError(f"corrupt checkpoint header: {exc}") from None

    state = OrderedDict()
    for k in range(n_tensors):
        (name_len,) = struct.unpack("<H", _take(stream, 2, f"tensor {k} name length"))
        name = _take(stream, name_len, f"tensor {k} name").decode("utf-8")
        (rank,) = struct.unpack("<B", _take(stream, 1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", _take(stream, 4 * rank, f"{name} dims"))
        (tag,) = struct.unpack("<B", _take(stream, 1, f"{name} dtype"))
        if tag not in _DTYPES:
            raise FileFormatError(f"{name}: unknown dtype tag {tag}")
        dtype = _DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        raw = _take(stream, count * dtype.itemsize, f"{name} data")
        state[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if stream.read(1):
        raise FileFormatError("trailing bytes after the last tensor")

    dtypes = {a.dtype for a in state.values()}
    model = MicroEnvNet(config, dtype=dtypes.pop() if len(dtypes) == 1 else np.float32)
    expected = model.state_dict()
    if set(expected) != set(state):
        missing, extra = sorted(set(expected) - set(state)), sorted(set(state) - set(expected))
        raise CheckpointShapeError(f"tensor names do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in state.items():
        if expected[name].shape != arr.shape:
            raise CheckpointShapeError(f"{name}: stored shape {arr.shape}, config expects {expected[name].shape}")
    model.load_state_dict(state)
    model.eval()
    return model, header


def save_checkpoint(model: MicroEnvNet, path, provenance: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, provenance))


def load_checkpoint(path) -> tuple[MicroEnvNet, dict]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
