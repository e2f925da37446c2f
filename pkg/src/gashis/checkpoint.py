"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"GHTCKPT\\0"
    version      uint16    FORMAT_VERSION
    dtype tag    uint8     storage dtype of the model (0 fp32, 1 fp16, 2 fp64)
    config len   uint32
    config       UTF-8 JSON, sorted keys: {"extra": ..., "model": ModelConfig}
    count        uint32    number of tensors
    per tensor, in name order:
        name len uint16, name UTF-8
        dtype    uint8     same codes as the tag
        ndim     uint8, then ndim x uint32 dims
        nbytes   uint64, then the raw little-endian values
    crc32        uint32    of every preceding byte

Writing is deterministic, so save -> load -> save reproduces the file byte
for byte.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import GasHisTransformer, ModelConfig

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointCorruptError",
    "CheckpointDtypeError",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
]

MAGIC = b"GHTCKPT\0"
FORMAT_VERSION = 1
_CODES = {"fp32": 0, "fp16": 1, "fp64": 2}
_NUMPY = {0: np.dtype("<f4"), 1: np.dtype("<f2"), 2: np.dtype("<f8")}
_NAMES = {v: k for k, v in _CODES.items()}


class CheckpointError(IOError):
    """Base class for unreadable checkpoints."""


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared content."""


class CheckpointCorruptError(CheckpointError):
    """The checksum does not match the content."""


class CheckpointDtypeError(CheckpointError):
    """Unknown dtype code, or tensors disagree with the declared dtype."""


def _code(arr: np.ndarray) -> int:
    for code, dt in _NUMPY.items():
        if arr.dtype == dt.newbyteorder("="):
            return code
    raise CheckpointDtypeError(f"cannot store dtype {arr.dtype}")


def encode(config: dict, tensors: dict[str, np.ndarray], dtype: str, extra: dict | None = None) -> bytes:
    if dtype not in _CODES:
        raise CheckpointDtypeError(f"unknown dtype tag {dtype!r}")
    meta = json.dumps({"extra": extra or {}, "model": config}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HBI", FORMAT_VERSION, _CODES[dtype], len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")  # ascontiguousarray would lift 0-d to 1-d
        code = _code(arr)
        raw = arr.astype(_NUMPY[code], copy=False).tobytes()
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(raw)) + raw)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file ends inside {what} (offset {self.pos}, need {n} bytes)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> tuple[dict, dict, str, dict[str, np.ndarray]]:
    """Return ``(model config, extra, dtype tag, tensors)``."""
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointVersionError(f"not a checkpoint: magic {magic!r}")
    version, tag, meta_len = r.unpack("<HBI", "header")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, this build reads {FORMAT_VERSION}")
    if tag not in _NAMES:
        raise CheckpointDtypeError(f"unknown dtype tag {tag}")
    meta = json.loads(r.take(meta_len, "config").decode())
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name")
        name = r.take(name_len, "tensor name").decode()
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in _NUMPY:
            raise CheckpointDtypeError(f"{name}: unknown dtype code {code}")
        if code != tag:
            raise CheckpointDtypeError(f"{name}: stored as {_NAMES[code]} in a {_NAMES[tag]} checkpoint")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        (nbytes,) = r.unpack("<Q", f"{name} size")
        expect = int(np.prod(shape, dtype=np.int64)) * _NUMPY[code].itemsize
        if nbytes != expect:
            raise CheckpointCorruptError(f"{name}: {nbytes} bytes for shape {shape}")
        raw = r.take(nbytes, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype=_NUMPY[code]).reshape(shape).astype(_NUMPY[code].newbyteorder("="))
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(data):
        raise CheckpointCorruptError(f"{len(data) - r.pos} trailing bytes after the checksum")
    if zlib.crc32(data[:body_end]) != crc:
        raise CheckpointCorruptError("checksum mismatch")
    return meta["model"], meta["extra"], _NAMES[tag], tensors


def save_checkpoint(model: GasHisTransformer, path: str | Path, extra: dict | None = None) -> None:
    """Write ``model`` atomically.  ``extra`` (JSON-serializable) defaults to ``model.checkpoint_extra``."""
    extra = getattr(model, "checkpoint_extra", {}) if extra is None else extra
    blob = encode(model.config.to_dict(), model.state_dict(), model.config.dtype, extra)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def read_checkpoint(path: str | Path) -> tuple[dict, dict, str, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def load_checkpoint(path: str | Path, expect_dtype: str | None = None) -> GasHisTransformer:
    """Rebuild the model stored at ``path``; ``checkpoint_extra`` carries the extra metadata."""
    config, extra, tag, tensors = read_checkpoint(path)
    if expect_dtype is not None and tag != expect_dtype:
        raise CheckpointDtypeError(f"checkpoint holds {tag} parameters, expected {expect_dtype}")
    if config.get("dtype") != tag:
        raise CheckpointDtypeError(f"config says {config.get('dtype')}, tag says {tag}")
    model = GasHisTransformer(ModelConfig(**config))
    model.load_state_dict(tensors)
    model.eval()
    model.checkpoint_extra = extra
    return model


def tensor_bytes(tensors: dict[str, np.ndarray]) -> int:
    """Parameter payload size with every header excluded."""
    return int(sum(a.nbytes for a in tensors.values()))
