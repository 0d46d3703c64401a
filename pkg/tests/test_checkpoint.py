import struct
import zlib

import numpy as np
import pytest

import oracles
from atinuke import checkpoint
from atinuke.errors import (
    BadMagicError,
    CheckpointError,
    CorruptCheckpointError,
    InconsistentCheckpointError,
    NonFiniteCheckpointError,
    UnsupportedVersionError,
)
from atinuke.tensor import Prng, Tensor
from atinuke.transformer import ModelConfig, UnusedHyperparameterWarning, init_params

REFERENCE = dict(vocab_size=10, model_dim=18, key_dim=50, hidden_dim=100, head_count=2, layer_count=3, dropout_rate=0.1)


def small():
    cfg = ModelConfig(vocab_size=5, model_dim=4, key_dim=4, hidden_dim=6, head_count=2, layer_count=2, max_len=16, seed=3)
    return init_params(cfg, Prng(cfg.seed)), cfg


def entry_offsets(buf):
    """Yield (name, payload_start, nbytes) by walking the layout independently of the reader."""
    (config_len,) = struct.unpack_from("<I", buf, 8)
    pos = 12 + config_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + name_len].decode()
        pos += 4 + name_len
        rank = buf[pos]
        pos += 1 + 4 * rank + 1
        (nbytes,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        yield name, pos, nbytes
        pos += nbytes + 4


class TestRoundTrip:
    def test_bit_identical(self):
        params, cfg = small()
        loaded, cfg2 = checkpoint.loads(checkpoint.dumps(params, cfg))
        assert cfg2 == cfg
        a, b = params.named(), loaded.named()
        assert a.keys() == b.keys()
        assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)

    def test_save_load_save_reference_model(self, tmp_path):
        with pytest.warns(UnusedHyperparameterWarning):
            cfg = ModelConfig(**REFERENCE)
        params = init_params(cfg, Prng(0))
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        checkpoint.save(params, cfg, first)
        loaded, cfg2 = checkpoint.load(first)
        checkpoint.save(loaded, cfg2, second)
        assert first.read_bytes() == second.read_bytes()
        assert oracles.count_by_shape_walk(t.shape for t in loaded.named().values()) == 15628

    def test_two_saves_identical(self):
        params, cfg = small()
        assert checkpoint.dumps(params, cfg) == checkpoint.dumps(params, cfg)

    def test_layout_header(self):
        params, cfg = small()
        buf = checkpoint.dumps(params, cfg)
        assert buf[:4] == b"ATNK"
        assert struct.unpack_from("<I", buf, 4) == (1,)
        names = [n for n, _, _ in entry_offsets(buf)]
        assert names == sorted(params.named())

    def test_f32_storage(self):
        params, cfg = small()
        buf = checkpoint.dumps(params, cfg, dtype="f32")
        assert len(buf) < len(checkpoint.dumps(params, cfg))
        loaded, _ = checkpoint.loads(buf)
        for name, t in params.named().items():
            np.testing.assert_array_equal(loaded.named()[name].data, t.data.astype(np.float32))
        assert checkpoint.dumps(loaded, cfg, dtype="f32") == buf

    def test_unknown_dtype_name(self):
        params, cfg = small()
        with pytest.raises(ValueError):
            checkpoint.dumps(params, cfg, dtype="f16")


class TestRejection:
    def test_bad_magic(self):
        params, cfg = small()
        buf = b"XXXX" + checkpoint.dumps(params, cfg)[4:]
        with pytest.raises(BadMagicError, match="bad magic"):
            checkpoint.loads(buf)

    def test_unknown_version(self):
        params, cfg = small()
        buf = bytearray(checkpoint.dumps(params, cfg))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(UnsupportedVersionError, match="version 2"):
            checkpoint.loads(bytes(buf))

    def test_tampered_payload_byte(self):
        params, cfg = small()
        buf = bytearray(checkpoint.dumps(params, cfg))
        _, start, _ = next(entry_offsets(bytes(buf)))
        buf[start + 3] ^= 0x01
        with pytest.raises(CorruptCheckpointError, match="checksum"):
            checkpoint.loads(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 10, 40, -1])
    def test_truncated(self, cut):
        params, cfg = small()
        buf = checkpoint.dumps(params, cfg)
        with pytest.raises(CheckpointError):
            checkpoint.loads(buf[:cut])

    def test_trailing_bytes(self):
        params, cfg = small()
        with pytest.raises(CorruptCheckpointError, match="trailing"):
            checkpoint.loads(checkpoint.dumps(params, cfg) + b"\0")

    def test_dims_inconsistent_with_config(self):
        params, cfg = small()
        buf = checkpoint.dumps(params, cfg)
        # same tensors, config claims a larger vocabulary
        text = cfg.to_text().encode()
        other = cfg.replace(vocab_size=6).to_text().encode()
        assert len(text) == len(other)
        with pytest.raises(InconsistentCheckpointError, match="'embedding' has dims"):
            checkpoint.loads(buf.replace(text, other))

    def test_non_finite_payload(self):
        params, cfg = small()
        buf = bytearray(checkpoint.dumps(params, cfg))
        name, start, nbytes = next(entry_offsets(bytes(buf)))
        buf[start:start + 8] = struct.pack("<d", float("nan"))
        buf[start + nbytes:start + nbytes + 4] = struct.pack("<I", zlib.crc32(bytes(buf[start:start + nbytes])))
        with pytest.raises(NonFiniteCheckpointError, match=name):
            checkpoint.loads(bytes(buf))

    def test_invalid_config_block(self):
        params, cfg = small()
        buf = checkpoint.dumps(params, cfg)
        text = cfg.to_text().encode()
        broken = text.replace(b"head_count=2", b"head_count=3")
        with pytest.raises(InconsistentCheckpointError, match="config"):
            checkpoint.loads(buf.replace(text, broken))

    def test_f32_overflow_refused(self):
        params, cfg = small()
        huge = params.with_named({"final_b": Tensor(np.full(5, 1e300))})
        with pytest.raises(ArithmeticError):
            checkpoint.dumps(huge, cfg, dtype="f32")
