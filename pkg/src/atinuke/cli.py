"""``atinuke`` command line: init, forward, gradcheck, train-toy.

Exit codes: 0 success, 2 config error, 3 input error, 4 verification
failure, 5 numeric divergence.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import CheckpointError, ConfigError, NumericError
from .tensor import Prng
from .training import COPY_LR, GRADCHECK_CONFIG, gradcheck, train_copy
from .transformer import ModelConfig, UnusedHyperparameterWarning, init_params, model_forward

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_VERIFY = 4
EXIT_DIVERGED = 5

SEED_ENV = "ATINUKE_SEED"


class InputError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def resolve_seed(flag: int | None, fallback: int = 0) -> int:
    """Explicit flag, else $ATINUKE_SEED, else ``fallback``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return fallback


def read_tokens(path, vocab_size: int, max_len: int) -> np.ndarray:
    """Parse a token batch file: one sequence per line, ids separated by single spaces."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as err:
        raise InputError(f"cannot read token file {path}: {err}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise InputError("no sequences in token file")
    rows = []
    for lineno, line in enumerate(lines, 1):
        if line == "":
            raise InputError(f"line {lineno}: empty sequence")
        row = []
        for col, field in enumerate(line.split(" "), 1):
            if not field.isdigit() or not field.isascii():
                raise InputError(f"line {lineno}, column {col}: not an unsigned integer: {field!r}")
            tok = int(field)
            if tok >= vocab_size:
                raise InputError(f"line {lineno}, column {col}: token {tok} >= vocab_size {vocab_size}")
            row.append(tok)
        if rows and len(row) != len(rows[0]):
            raise InputError(f"line {lineno}: {len(row)} tokens, expected {len(rows[0])} (ragged batches are not supported)")
        rows.append(row)
    if len(rows[0]) > max_len:
        raise InputError(f"sequence length {len(rows[0])} exceeds max_len {max_len}")
    return np.array(rows, dtype=np.int64)


def format_logits_text(logits: np.ndarray) -> str:
    flat = logits.reshape(-1, logits.shape[-1])
    return "".join(" ".join(format(v, ".9g") for v in row) + "\n" for row in flat)


def format_logits_binary(logits: np.ndarray) -> bytes:
    header = struct.pack(f"<I{logits.ndim}I", logits.ndim, *logits.shape)
    return header + logits.astype("<f8").tobytes(order="C")


def read_logits_binary(buf: bytes) -> np.ndarray:
    (rank,) = struct.unpack_from("<I", buf)
    dims = struct.unpack_from(f"<{rank}I", buf, 4)
    return np.frombuffer(buf, "<f8", offset=4 + 4 * rank).reshape(dims)


def format_shape(shape) -> str:
    return "×".join(str(n) for n in shape)


# ---------------------------------------------------------------------------
# commands


def cmd_init(args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as err:
        _err(f"cannot read config {args.config}: {err}")
        return EXIT_INPUT
    try:
        cfg = ModelConfig.from_text(text)
        with warnings.catch_warnings():
            # from_text already warned about this config
            warnings.simplefilter("ignore", UnusedHyperparameterWarning)
            cfg = cfg.replace(seed=resolve_seed(args.seed, cfg.seed))
    except ConfigError as err:
        _err("invalid config")
        for problem in err.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    params = init_params(cfg, Prng(cfg.seed))
    checkpoint.save(params, cfg, args.out, dtype=args.dtype)
    print(f"parameters: {params.count()}")
    return EXIT_OK


def cmd_forward(args) -> int:
    try:
        params, cfg = checkpoint.load(args.checkpoint)
    except (OSError, CheckpointError) as err:
        _err(f"cannot load checkpoint {args.checkpoint}: {err}")
        return EXIT_INPUT
    try:
        tokens = read_tokens(args.input, cfg.vocab_size, cfg.max_len)
    except InputError as err:
        _err(str(err))
        return EXIT_INPUT
    logits = model_forward(tokens, params, cfg, mode="eval").data
    if args.format == "text":
        Path(args.output).write_text(format_logits_text(logits), encoding="utf-8")
    else:
        Path(args.output).write_bytes(format_logits_binary(logits))
    print(f"shape: {format_shape(logits.shape)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = resolve_seed(args.seed)
    result = gradcheck(seed)
    cfg = GRADCHECK_CONFIG
    print(
        f"gradcheck: vocab={cfg.vocab_size} dim={cfg.model_dim} layers={cfg.layer_count} "
        f"seq=3 seed={seed} coordinates={result.coordinates}"
    )
    for name, (err, idx, analytic, numeric) in result.worst.items():
        print(f"  {name:<28} worst rel err {err:.3e} at {idx} (analytic {analytic:.9g}, numeric {numeric:.9g})")
    print(f"max relative error: {result.max_error:.3e} (tolerance {args.tolerance:g})")
    failures = result.failures(args.tolerance)
    if failures:
        for name, idx, err in failures:
            _err(f"gradient mismatch in {name} at {idx}: relative error {err:.3e} > {args.tolerance:g}")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_train_toy(args) -> int:
    seed = resolve_seed(args.seed)
    try:
        result = train_copy(
            args.steps, seed, lr=args.lr,
            log=lambda step, loss: print(f"step {step} loss {loss:.6f}", flush=True),
        )
    except NumericError as err:
        _err(f"training {err}")
        return EXIT_DIVERGED
    print(f"held-out loss: {result.heldout_loss:.6f}")
    checkpoint.save(result.params, result.config, args.out)
    return EXIT_OK


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atinuke", description="Atinuke transformer engine: init, forward, gradcheck, train-toy.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a freshly initialised checkpoint")
    p.add_argument("config", help="key=value config file")
    p.add_argument("--seed", type=int, help=f"overrides the config seed (fallback: ${SEED_ENV})")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--dtype", choices=("f64", "f32"), default="f64", help="payload storage precision")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("forward", help="eval-mode logits for a token batch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="token batch file")
    p.add_argument("--output", required=True)
    p.add_argument("--format", choices=("text", "binary"), default="text")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=_positive_float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train on a synthetic copy task")
    p.add_argument("--task", choices=("copy",), default="copy")
    p.add_argument("--steps", type=_positive_int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=_positive_float, default=COPY_LR)
    p.add_argument("--out", required=True, help="checkpoint path for the trained model")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        _err(str(err))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
