"""Canonical binary checkpoint: config text plus named parameter tensors.

Layout, all integers little-endian::

    magic          4 bytes   b"ATNK"
    version        u32       FORMAT_VERSION
    config_len     u32
    config         UTF-8     ModelConfig.to_text(): sorted key=value lines
    entry_count    u32
    entry * entry_count, sorted by name:
        name_len   u32
        name       UTF-8
        rank       u8
        dims       u32 * rank
        dtype      u8        1 = f32, 2 = f64
        nbytes     u64       product(dims) * dtype width
        payload    nbytes    little-endian IEEE-754
        crc32      u32       zlib.crc32 of payload

Nothing else is written (no timestamps, no padding), so identical state
always serializes to identical bytes.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    CorruptCheckpointError,
    InconsistentCheckpointError,
    NonFiniteCheckpointError,
    NumericError,
    UnsupportedVersionError,
)
from .tensor import Tensor
from .transformer import ModelConfig, ModelParams, check_params, expected_shapes

MAGIC = b"ATNK"
FORMAT_VERSION = 1
DTYPES = {"f32": (1, np.dtype("<f4")), "f64": (2, np.dtype("<f8"))}
_BY_CODE = {code: dt for code, dt in DTYPES.values()}


def dumps(params: ModelParams, cfg: ModelConfig, dtype: str = "f64") -> bytes:
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    check_params(params, cfg)
    code, np_dtype = DTYPES[dtype]
    out = io.BytesIO()
    config = cfg.to_text().encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(config)))
    out.write(config)
    named = params.named()
    out.write(struct.pack("<I", len(named)))
    for name in sorted(named):
        t = named[name]
        with np.errstate(over="ignore"):
            payload = t.data.astype(np_dtype).tobytes(order="C")
        if dtype == "f32" and not np.isfinite(np.frombuffer(payload, np_dtype)).all():
            raise NumericError(f"{name} overflows f32 storage")
        encoded = name.encode("utf-8")
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", t.rank))
        out.write(struct.pack(f"<{t.rank}I", *t.shape))
        out.write(struct.pack("<BQ", code, len(payload)))
        out.write(payload)
        out.write(struct.pack("<I", zlib.crc32(payload)))
    return out.getvalue()


def save(params: ModelParams, cfg: ModelConfig, path, dtype: str = "f64") -> None:
    """Write a checkpoint. f64 values are stored verbatim unless ``dtype="f32"``."""
    Path(path).write_bytes(dumps(params, cfg, dtype))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> tuple[ModelParams, ModelConfig]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {buf[:4]!r}")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})")
    (config_len,) = r.unpack("<I", "config length")
    try:
        cfg = ModelConfig.from_text(r.take(config_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as err:
        raise InconsistentCheckpointError(f"invalid config block: {err}") from None

    expected = expected_shapes(cfg)
    (count,) = r.unpack("<I", "entry count")
    named: dict[str, Tensor] = {}
    previous = None
    for _ in range(count):
        (name_len,) = r.unpack("<I", "entry name length")
        try:
            name = r.take(name_len, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError("entry name is not valid UTF-8") from None
        if previous is not None and name <= previous:
            raise CorruptCheckpointError(f"entry {name!r} out of order or duplicated")
        previous = name
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        code, nbytes = r.unpack("<BQ", f"dtype of {name}")
        if code not in _BY_CODE:
            raise CorruptCheckpointError(f"entry {name!r} has unknown dtype code {code}")
        np_dtype = _BY_CODE[code]
        size = int(np.prod(dims)) if dims else 1
        if nbytes != size * np_dtype.itemsize:
            raise CorruptCheckpointError(
                f"entry {name!r}: payload length {nbytes} != {size} x {np_dtype.itemsize} bytes"
            )
        payload = r.take(nbytes, f"payload of {name}")
        (crc,) = r.unpack("<I", f"checksum of {name}")
        if zlib.crc32(payload) != crc:
            raise CorruptCheckpointError(f"entry {name!r}: payload checksum mismatch")
        if name not in expected:
            raise InconsistentCheckpointError(f"entry {name!r} is not a parameter of the stored config")
        if tuple(dims) != expected[name]:
            raise InconsistentCheckpointError(
                f"entry {name!r} has dims {tuple(dims)}, config implies {expected[name]}"
            )
        values = np.frombuffer(payload, np_dtype).astype(np.float64).reshape(dims)
        if not np.isfinite(values).all():
            raise NonFiniteCheckpointError(f"entry {name!r} contains non-finite values")
        named[name] = Tensor.adopt(values)
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - r.pos} trailing bytes after last entry")
    missing = sorted(set(expected) - set(named))
    if missing:
        raise InconsistentCheckpointError(f"missing entries: {', '.join(missing)}")
    return ModelParams.from_named(named, cfg.layer_count), cfg


def load(path) -> tuple[ModelParams, ModelConfig]:
    return loads(Path(path).read_bytes())
