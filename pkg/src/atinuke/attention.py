"""Multi-head scaled dot-product self-attention with an optional causal mask."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass

import numpy as np

from . import tensor as K
from .autodiff import EAGER, Ops
from .errors import ConfigError, ShapeError
from .tensor import Prng, Tensor, as_tensor

SCALE_MODES = ("full_dim", "head_dim")
MASK_VALUE = -sys.float_info.max


@dataclass(frozen=True)
class AttentionConfig:
    head_count: int
    model_dim: int
    causal: bool = False
    scale_denominator: str = "full_dim"

    def __post_init__(self):
        problems = []
        if self.head_count < 1:
            problems.append(f"head_count must be >= 1, got {self.head_count}")
        if self.model_dim < 1:
            problems.append(f"model_dim must be >= 1, got {self.model_dim}")
        elif self.head_count >= 1 and self.model_dim % self.head_count:
            problems.append(
                f"model_dim {self.model_dim} is not divisible by head_count {self.head_count}"
            )
        if self.scale_denominator not in SCALE_MODES:
            problems.append(f"scale_denominator must be one of {SCALE_MODES}, got {self.scale_denominator!r}")
        if problems:
            raise ConfigError(problems)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.head_count

    @property
    def scale(self) -> float:
        d = self.model_dim if self.scale_denominator == "full_dim" else self.head_dim
        return 1.0 / math.sqrt(d)


@dataclass(frozen=True)
class AttentionParams:
    """Bias-free projections, each ``model_dim x model_dim``, applied as ``x @ w``."""

    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    w_out: Tensor

    def __post_init__(self):
        d = self.w_query.shape[0]
        for name in ("w_query", "w_key", "w_value", "w_out"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be square {d}x{d}, got {getattr(self, name).shape}")

    @property
    def model_dim(self) -> int:
        return self.w_query.shape[0]

    @classmethod
    def init(cls, model_dim: int, rng: Prng) -> AttentionParams:
        ws = [K.xavier_uniform_init(model_dim, model_dim, rng) for _ in range(4)]
        return cls(*ws)


def _check_heads(model_dim: int, head_count: int) -> None:
    if head_count < 1 or model_dim % head_count:
        raise ConfigError(f"model_dim {model_dim} is not divisible by head_count {head_count}")


def split_heads(x: Tensor, head_count: int, ops: Ops = EAGER) -> Tensor:
    """``batch x seq x model_dim`` -> ``batch x head x seq x head_dim``."""
    if x.rank != 3:
        raise ShapeError(f"split_heads expects batch x seq x model_dim, got {x.shape}")
    b, s, d = x.shape
    _check_heads(d, head_count)
    return ops.transpose(ops.reshape(x, (b, s, head_count, d // head_count)), 1, 2)


def merge_heads(x: Tensor, ops: Ops = EAGER) -> Tensor:
    """Inverse of :func:`split_heads`."""
    if x.rank != 4:
        raise ShapeError(f"merge_heads expects batch x head x seq x head_dim, got {x.shape}")
    b, h, s, hd = x.shape
    return ops.reshape(ops.transpose(x, 1, 2), (b, s, h * hd))


def causal_mask(seq: int) -> Tensor:
    """Additive ``seq x seq`` mask: 0 where key <= query, the most negative float elsewhere."""
    if seq < 1:
        raise ValueError(f"seq must be >= 1, got {seq}")
    future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    return Tensor.adopt(np.where(future, MASK_VALUE, 0.0))


def _validate(x: Tensor, p: AttentionParams, cfg: AttentionConfig) -> None:
    if x.rank != 3:
        raise ShapeError(f"attention input must be batch x seq x model_dim, got {x.shape}")
    if x.shape[-1] != cfg.model_dim or p.model_dim != cfg.model_dim:
        raise ShapeError(
            f"attention width mismatch: input {x.shape}, weights {p.w_query.shape}, config model_dim {cfg.model_dim}"
        )


def _weights(x: Tensor, p: AttentionParams, cfg: AttentionConfig, ops: Ops):
    q = split_heads(ops.matmul(x, p.w_query), cfg.head_count, ops)
    k = split_heads(ops.matmul(x, p.w_key), cfg.head_count, ops)
    v = split_heads(ops.matmul(x, p.w_value), cfg.head_count, ops)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, 2, 3)), cfg.scale)
    if cfg.causal:
        scores = ops.add(scores, causal_mask(x.shape[1]))
    return ops.softmax_lastdim(scores), v


def attention_weights(x, p: AttentionParams, cfg: AttentionConfig) -> Tensor:
    """Per-head attention distributions, ``batch x head x query x key``."""
    x = as_tensor(x)
    _validate(x, p, cfg)
    return _weights(x, p, cfg, EAGER)[0]


def attention_forward(x, p: AttentionParams, cfg: AttentionConfig, ops: Ops = EAGER) -> Tensor:
    """Self-attention over ``x`` (``batch x seq x model_dim``), same shape out.

    Each head h computes ``softmax(Q_h K_h^T / sqrt(D) + mask) V_h``; heads are
    concatenated and projected by ``w_out``. D is the full width or the head
    width depending on ``cfg.scale_denominator``.
    """
    x = as_tensor(x)
    _validate(x, p, cfg)
    attn, v = _weights(x, p, cfg, ops)
    return ops.matmul(merge_heads(ops.matmul(attn, v), ops), p.w_out)
