"""Atinuke: a small transformer engine with its own kernels, autodiff and checkpoints."""

from .attention import AttentionConfig, AttentionParams, attention_forward
from .autodiff import EAGER, Tape, backward, cross_entropy, sgd_step
from .checkpoint import load, save
from .errors import (
    AtinukeError,
    CheckpointError,
    ConfigError,
    ContractError,
    IndexRangeError,
    NumericError,
    ShapeError,
)
from .positional import PositionalTable, build_table, lookup_positions
from .tensor import Prng, Tensor
from .transformer import (
    BlockParams,
    ModelConfig,
    ModelParams,
    block_forward,
    dropout_apply,
    init_params,
    model_forward,
)

__version__ = "0.1.0"

__all__ = [
    "AtinukeError", "AttentionConfig", "AttentionParams", "BlockParams", "CheckpointError", "ConfigError",
    "ContractError", "EAGER", "IndexRangeError", "ModelConfig", "ModelParams", "NumericError", "PositionalTable",
    "Prng", "ShapeError", "Tape", "Tensor", "attention_forward", "backward", "block_forward", "build_table",
    "cross_entropy", "dropout_apply", "init_params", "load", "lookup_positions", "model_forward", "save",
    "sgd_step",
]
