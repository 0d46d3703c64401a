"""Pre-norm transformer block and the full token-to-logits model."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

from . import tensor as K
from .attention import SCALE_MODES, AttentionConfig, AttentionParams, attention_forward
from .autodiff import EAGER, Ops
from .errors import ConfigError, IndexRangeError, ShapeError
from .positional import build_table, lookup_positions, sequence_positions
from .tensor import ACTIVATIONS, Prng, Tensor

MODES = ("train", "eval")


class UnusedHyperparameterWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int
    key_dim: int
    hidden_dim: int
    head_count: int
    layer_count: int
    dropout_rate: float = 0.0
    max_len: int = 50000
    activation: str = "relu"
    causal: bool = False
    per_layer_pe: bool = False
    scale_denominator: str = "full_dim"
    layer_norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        if self.key_dim != self.model_dim:
            warnings.warn(
                f"key_dim={self.key_dim} is accepted for compatibility but has no effect; "
                f"attention projections are model_dim x model_dim ({self.model_dim})",
                UnusedHyperparameterWarning,
                stacklevel=3,
            )

    def problems(self) -> list[str]:
        out = []
        for name in ("vocab_size", "hidden_dim", "layer_count", "max_len", "head_count", "key_dim"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim < 2 or self.model_dim % 2:
            out.append(f"model_dim must be a positive even number, got {self.model_dim}")
        if self.head_count >= 1 and self.model_dim >= 1 and self.model_dim % self.head_count:
            out.append(f"model_dim {self.model_dim} is not divisible by head_count {self.head_count}")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            out.append(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.scale_denominator not in SCALE_MODES:
            out.append(f"scale_denominator must be one of {SCALE_MODES}, got {self.scale_denominator!r}")
        if not self.layer_norm_eps > 0:
            out.append(f"layer_norm_eps must be positive, got {self.layer_norm_eps}")
        if not 0 <= self.seed < 2**64:
            out.append(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        return out

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.head_count, self.model_dim, self.causal, self.scale_denominator)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    # canonical text form: one ``key=value`` per line, keys sorted

    def to_text(self) -> str:
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> ModelConfig:
        """Parse ``key=value`` lines. Blank lines and ``#`` comments (whole-line or trailing) are ignored."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values, problems, bad = {}, [], set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.partition("#")[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                problems.append(f"line {lineno}: expected key=value, got {raw!r}")
            elif key not in types:
                problems.append(f"line {lineno}: unknown key {key!r}")
            elif key in values:
                problems.append(f"line {lineno}: duplicate key {key!r}")
            else:
                try:
                    values[key] = _parse_value(types[key], value)
                except ValueError:
                    problems.append(f"line {lineno}: bad {types[key]} value for {key}: {value!r}")
                    bad.add(key)
        values.update(overrides)
        required = [f.name for f in dataclasses.fields(cls) if f.default is dataclasses.MISSING]
        problems += [f"missing required key {k!r}" for k in required if k not in values and k not in bad]
        if problems:
            raise ConfigError(problems)
        return cls(**values)


def _parse_value(kind: str, value: str):
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(value)
    return value


@dataclass(frozen=True)
class BlockParams:
    attention: AttentionParams
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}attention.{k}": getattr(self.attention, k) for k in _ATTN_FIELDS}
        for k in _BLOCK_FIELDS:
            out[prefix + k] = getattr(self, k)
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], prefix: str = "") -> BlockParams:
        attn = AttentionParams(*(named[f"{prefix}attention.{k}"] for k in _ATTN_FIELDS))
        return cls(attn, *(named[prefix + k] for k in _BLOCK_FIELDS))


_ATTN_FIELDS = ("w_query", "w_key", "w_value", "w_out")
_BLOCK_FIELDS = tuple(f.name for f in dataclasses.fields(BlockParams) if f.name != "attention")


@dataclass(frozen=True)
class ModelParams:
    embedding: Tensor
    blocks: tuple[BlockParams, ...]
    final_w: Tensor
    final_b: Tensor

    def named(self) -> dict[str, Tensor]:
        """Every learnable tensor under a stable dotted name, e.g. ``blocks.0.ff_w1``."""
        out = {"embedding": self.embedding}
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"blocks.{i}."))
        out["final_w"] = self.final_w
        out["final_b"] = self.final_b
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], layer_count: int) -> ModelParams:
        blocks = tuple(BlockParams.from_named(named, f"blocks.{i}.") for i in range(layer_count))
        return cls(named["embedding"], blocks, named["final_w"], named["final_b"])

    def with_named(self, named: dict[str, Tensor]) -> ModelParams:
        merged = self.named()
        merged.update(named)
        return ModelParams.from_named(merged, len(self.blocks))

    def count(self) -> int:
        return sum(t.size for t in self.named().values())


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, v = cfg.model_dim, cfg.hidden_dim, cfg.vocab_size
    shapes = {"embedding": (v, d)}
    for i in range(cfg.layer_count):
        p = f"blocks.{i}."
        for k in _ATTN_FIELDS:
            shapes[f"{p}attention.{k}"] = (d, d)
        shapes.update({
            p + "ff_w1": (d, h), p + "ff_b1": (h,),
            p + "ff_w2": (h, d), p + "ff_b2": (d,),
            p + "norm1_gamma": (d,), p + "norm1_beta": (d,),
            p + "norm2_gamma": (d,), p + "norm2_beta": (d,),
        })
    shapes["final_w"] = (d, v)
    shapes["final_b"] = (v,)
    return shapes


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    named = params.named()
    expected = expected_shapes(cfg)
    if len(params.blocks) != cfg.layer_count:
        raise ShapeError(f"{len(params.blocks)} blocks for layer_count {cfg.layer_count}")
    for name, shape in expected.items():
        if named[name].shape != shape:
            raise ShapeError(f"parameter {name} has shape {named[name].shape}, expected {shape}")


def init_params(cfg: ModelConfig, rng: Prng) -> ModelParams:
    """Xavier-uniform matrices, zero biases and betas, unit gammas.

    Draw order is fixed: embedding, then per block the four attention
    matrices, ff_w1, ff_w2, and finally the output projection.
    """
    d, h, v = cfg.model_dim, cfg.hidden_dim, cfg.vocab_size
    embedding = K.xavier_uniform_init(v, d, rng)
    blocks = []
    for _ in range(cfg.layer_count):
        attn = AttentionParams.init(d, rng)
        w1 = K.xavier_uniform_init(d, h, rng)
        w2 = K.xavier_uniform_init(h, d, rng)
        blocks.append(BlockParams(
            attn, w1, Tensor.zeros(h), w2, Tensor.zeros(d),
            Tensor.ones(d), Tensor.zeros(d), Tensor.ones(d), Tensor.zeros(d),
        ))
    final_w = K.xavier_uniform_init(d, v, rng)
    return ModelParams(embedding, tuple(blocks), final_w, Tensor.zeros(v))


def _check_mode(mode: str, rate: float, rng) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "train" and rate > 0 and rng is None:
        raise ValueError("train-mode dropout needs an rng")


def dropout_apply(x: Tensor, rate: float, mode: str, rng: Prng | None, ops: Ops = EAGER) -> Tensor:
    """Inverted dropout. Identity in eval mode or at rate 0 (no draws are consumed)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    _check_mode(mode, rate, rng)
    if mode == "eval" or rate == 0.0:
        return x
    return ops.dropout(x, rate, rng)


def feed_forward(x: Tensor, b: BlockParams, kind: str, ops: Ops = EAGER) -> Tensor:
    hidden = ops.activation(ops.add(ops.matmul(x, b.ff_w1), b.ff_b1), kind)
    return ops.add(ops.matmul(hidden, b.ff_w2), b.ff_b2)


def block_forward(
    x: Tensor,
    b: BlockParams,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: Prng | None = None,
    ops: Ops = EAGER,
) -> Tensor:
    """``x + Drop(Attn(LN1(x)))`` followed by ``x + Drop(FF(LN2(x)))``."""
    _check_mode(mode, cfg.dropout_rate, rng)
    eps = cfg.layer_norm_eps
    a = attention_forward(ops.layer_norm(x, b.norm1_gamma, b.norm1_beta, eps), b.attention, cfg.attention, ops)
    x = ops.add(x, dropout_apply(a, cfg.dropout_rate, mode, rng, ops))
    f = feed_forward(ops.layer_norm(x, b.norm2_gamma, b.norm2_beta, eps), b, cfg.activation, ops)
    return ops.add(x, dropout_apply(f, cfg.dropout_rate, mode, rng, ops))


def positional_rows(cfg: ModelConfig, batch: int, seq: int) -> Tensor:
    if seq > cfg.max_len:
        raise IndexRangeError(f"sequence length {seq} exceeds max_len {cfg.max_len}")
    return lookup_positions(build_table(cfg.model_dim, cfg.max_len), sequence_positions(batch, seq))


def model_forward(
    tokens,
    p: ModelParams,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: Prng | None = None,
    ops: Ops = EAGER,
    positional: bool = True,
) -> Tensor:
    """Token ids (``batch x seq``) to logits (``batch x seq x vocab_size``).

    ``positional=False`` skips every positional-table addition; it exists for
    diagnostics such as permutation-equivariance checks.

    RNG draws in train mode happen in a fixed order: input dropout, then per
    block the attention and feed-forward dropouts.
    """
    tokens = K.as_ids(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be batch x seq, got shape {tokens.shape}")
    _check_mode(mode, cfg.dropout_rate, rng)
    batch, seq = tokens.shape
    pe = positional_rows(cfg, batch, seq) if positional else None

    x = ops.embedding_gather(p.embedding, tokens)
    if pe is not None:
        x = ops.add(x, pe)
    x = dropout_apply(x, cfg.dropout_rate, mode, rng, ops)
    for b in p.blocks:
        if cfg.per_layer_pe and pe is not None:
            x = ops.add(x, pe)
        x = block_forward(x, b, cfg, mode, rng, ops)
    return ops.add(ops.matmul(x, p.final_w), p.final_b)


def model_loss(
    tokens,
    targets,
    p: ModelParams,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: Prng | None = None,
    ops: Ops = EAGER,
    mask=None,
) -> Tensor:
    logits = model_forward(tokens, p, cfg, mode, rng, ops)
    return ops.cross_entropy(logits, targets, mask)


def parameter_count_formula(cfg: ModelConfig) -> int:
    """Closed-form count of learnable scalars for ``cfg``."""
    d, h, v = cfg.model_dim, cfg.hidden_dim, cfg.vocab_size
    per_block = 4 * d * d + (d * h + h) + (h * d + d) + 4 * d
    return v * d + cfg.layer_count * per_block + d * v + v


__all__ = [
    "BlockParams",
    "ModelConfig",
    "ModelParams",
    "UnusedHyperparameterWarning",
    "block_forward",
    "check_params",
    "dropout_apply",
    "expected_shapes",
    "init_params",
    "model_forward",
    "model_loss",
    "parameter_count_formula",
]
