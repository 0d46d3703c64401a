"""Fixed sinusoidal position table.

Row ``pos`` holds ``sin(pos / 10000**(2i/d))`` at even column ``2i`` and the
matching cosine at ``2i + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_ids, check_id_range

BASE = 10000.0


@dataclass(frozen=True)
class PositionalTable:
    max_len: int
    model_dim: int
    table: Tensor

    def row(self, pos: int) -> np.ndarray:
        return self.table.data[pos]


def frequencies(model_dim: int) -> np.ndarray:
    """The divisors ``10000**(2i/model_dim)`` for i = 0 .. model_dim/2 - 1."""
    two_i = np.arange(0, model_dim, 2, dtype=np.float64)
    return np.power(BASE, two_i / model_dim)


@lru_cache(maxsize=16)
def build_table(model_dim: int, max_len: int) -> PositionalTable:
    """Tables are immutable, so repeated builds with the same arguments share one instance."""
    problems = []
    if model_dim < 2 or model_dim % 2:
        problems.append(f"model_dim must be a positive even number for sin/cos pairs, got {model_dim}")
    if max_len < 1:
        problems.append(f"max_len must be >= 1, got {max_len}")
    if problems:
        raise ConfigError(problems)

    position = np.arange(max_len, dtype=np.float64)[:, None]
    angle = position / frequencies(model_dim)[None, :]
    table = np.empty((max_len, model_dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return PositionalTable(max_len, model_dim, Tensor.adopt(table))


def lookup_positions(table: PositionalTable, positions) -> Tensor:
    """Gather table rows for an integer ``batch x seq`` array of positions."""
    positions = as_ids(positions)
    if positions.ndim != 2:
        raise ShapeError(f"positions must be batch x seq, got shape {positions.shape}")
    check_id_range(positions, table.max_len, what="position")
    return Tensor.adopt(table.table.data[positions])


def sequence_positions(batch: int, seq: int) -> np.ndarray:
    """Per-row indices 0..seq-1, repeated for each batch row."""
    return np.broadcast_to(np.arange(seq, dtype=np.int64), (batch, seq)).copy()
