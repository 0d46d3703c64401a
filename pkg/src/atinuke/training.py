"""Gradient computation, finite-difference checking and the toy copy task."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tape, backward, relative_error, sgd_step
from .errors import NumericError
from .tensor import Prng, Tensor
from .transformer import ModelConfig, ModelParams, init_params, model_loss


def derived_seed(seed: int, offset: int) -> int:
    """A distinct stream seed, wrapping within the unsigned 64-bit range."""
    return (seed + offset) % 2**64


def loss_and_grads(params: ModelParams, cfg: ModelConfig, tokens, targets, mask=None,
                   mode: str = "eval", rng: Prng | None = None) -> tuple[float, dict[str, Tensor]]:
    tape = Tape()
    tape.watch_all(params.named())
    loss = model_loss(tokens, targets, params, cfg, mode, rng, ops=tape, mask=mask)
    return loss.item(), backward(tape, loss)


# ---------------------------------------------------------------------------
# finite-difference gradient check

GRADCHECK_CONFIG = ModelConfig(
    vocab_size=5, model_dim=4, key_dim=4, hidden_dim=8, head_count=2, layer_count=1,
    dropout_rate=0.1, max_len=16, activation="gelu", causal=True,
)
GRADCHECK_BATCH = 2
GRADCHECK_SEQ = 3
FD_STEP = 1e-5


@dataclass
class GradcheckResult:
    # parameter name -> (worst relative error, coordinate, analytic, numeric)
    worst: dict[str, tuple[float, tuple[int, ...], float, float]] = field(default_factory=dict)
    coordinates: int = 0

    @property
    def max_error(self) -> float:
        return max(w[0] for w in self.worst.values())

    def failures(self, tolerance: float) -> list[tuple[str, tuple[int, ...], float]]:
        return [(n, w[1], w[0]) for n, w in self.worst.items() if w[0] > tolerance]


def gradcheck(seed: int = 0, cfg: ModelConfig = GRADCHECK_CONFIG, h: float = FD_STEP,
              batch: int = GRADCHECK_BATCH, seq: int = GRADCHECK_SEQ) -> GradcheckResult:
    """Compare tape gradients with central differences at every parameter coordinate.

    Runs in train mode; each loss evaluation reseeds the dropout generator so
    every evaluation samples the same masks as the recorded one.
    """
    data_rng = Prng(seed)
    params = init_params(cfg, data_rng)
    # random non-zero biases/norm params so their gradients are non-trivial
    named = {
        n: Tensor.adopt(t.data + data_rng.uniform(-0.5, 0.5, t.shape)) for n, t in params.named().items()
    }
    params = params.with_named(named)
    tokens = data_rng.integers(0, cfg.vocab_size, (batch, seq))
    targets = data_rng.integers(0, cfg.vocab_size, (batch, seq))
    dropout_seed = derived_seed(seed, 1)

    def loss_at(p: ModelParams) -> float:
        return model_loss(tokens, targets, p, cfg, "train", Prng(dropout_seed)).item()

    _, grads = loss_and_grads(params, cfg, tokens, targets, mode="train", rng=Prng(dropout_seed))
    result = GradcheckResult()
    for name, theta in named.items():
        worst = (-1.0, (), 0.0, 0.0)
        for idx in np.ndindex(theta.shape):
            bumped = []
            for sign in (1.0, -1.0):
                arr = theta.numpy()
                arr[idx] += sign * h
                bumped.append(loss_at(params.with_named({name: Tensor.adopt(arr)})))
            numeric = (bumped[0] - bumped[1]) / (2 * h)
            analytic = float(grads[name].data[idx])
            err = relative_error(analytic, numeric)
            result.coordinates += 1
            if err > worst[0]:
                worst = (err, tuple(int(i) for i in idx), analytic, numeric)
        result.worst[name] = worst
    return result


# ---------------------------------------------------------------------------
# copy task

COPY_VOCAB = 16
COPY_DELIMITER = COPY_VOCAB - 1
COPY_PREFIX = 5
COPY_BATCH = 32
COPY_LR = 0.1


def copy_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(
        vocab_size=COPY_VOCAB, model_dim=32, key_dim=32, hidden_dim=64, head_count=2,
        layer_count=2, dropout_rate=0.0, max_len=2 * COPY_PREFIX + 1, causal=True, seed=seed,
    )


def copy_batch(rng: Prng, batch: int = COPY_BATCH, prefix: int = COPY_PREFIX):
    """``prefix, DELIM, prefix`` sequences as (inputs, targets, loss mask).

    Only targets after the delimiter count toward the loss: the prefix itself
    is random and cannot be predicted.
    """
    body = rng.integers(0, COPY_DELIMITER, (batch, prefix))
    delim = np.full((batch, 1), COPY_DELIMITER, dtype=np.int64)
    seq = np.concatenate([body, delim, body], axis=1)
    mask = np.zeros((batch, 2 * prefix), dtype=bool)
    mask[:, prefix:] = True
    return seq[:, :-1], seq[:, 1:], mask


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    losses: list[float]
    heldout_loss: float


def train_copy(steps: int, seed: int, lr: float = COPY_LR,
               log: Callable[[int, float], None] | None = None, log_every: int = 100) -> TrainResult:
    """Plain SGD on the copy task. Raises NumericError if the loss stops being finite."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    cfg = copy_config(seed)
    params = init_params(cfg, Prng(seed))
    data_rng = Prng(derived_seed(seed, 1))
    heldout = copy_batch(Prng(derived_seed(seed, 2)), batch=256)
    losses = []
    for step in range(1, steps + 1):
        tokens, targets, mask = copy_batch(data_rng)
        # overflow surfaces as NumericError from the Tensor finiteness check
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                loss, grads = loss_and_grads(params, cfg, tokens, targets, mask)
                if not math.isfinite(loss):
                    raise NumericError(f"loss {loss}")
                params = sgd_step(params, grads, lr)
            except NumericError as err:
                raise NumericError(f"diverged at step {step}: {err}") from None
        losses.append(loss)
        if log is not None and (step % log_every == 0 or step == steps):
            log(step, loss)
    tokens, targets, mask = heldout
    heldout_loss = model_loss(tokens, targets, params, cfg, mask=mask).item()
    return TrainResult(params, cfg, losses, heldout_loss)
