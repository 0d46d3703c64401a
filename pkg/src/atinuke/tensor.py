"""Dense float64 tensor value type and the numeric kernels the model is built from.

Every kernel is a pure function: it never mutates its inputs and returns a
fresh :class:`Tensor`. Storage is a read-only, C-contiguous numpy array.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import IndexRangeError, NumericError, ShapeError

MAX_RANK = 4
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check(arr: np.ndarray) -> None:
    if not 1 <= arr.ndim <= MAX_RANK:
        raise ShapeError(f"tensor rank must be 1..{MAX_RANK}, got shape {arr.shape}")
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in tensor of shape {arr.shape}")


class Tensor:
    """Immutable row-major array of 64-bit floats with rank 1 to 4.

    Construction copies the input and enforces the invariants: positive
    extents and finite entries. A scalar (for example a loss) has shape ``(1,)``.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        _check(arr)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def adopt(cls, arr: np.ndarray) -> Tensor:
        """Wrap a freshly computed array without copying it.

        The caller hands over ownership; the array is frozen in place.
        """
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _check(arr)
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, *shape: int) -> Tensor:
        return cls.adopt(np.zeros(shape))

    @classmethod
    def ones(cls, *shape: int) -> Tensor:
        return cls.adopt(np.ones(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """A writable copy of the underlying data."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=12)})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Prng:
    """Seeded generator backed by the counter-based Philox4x64 bit generator.

    Draws depend only on the seed and the sequence of calls, so runs replay
    exactly across machines. Not safe to share between concurrent callers.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(seed))

    def random(self, shape) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def __repr__(self) -> str:
        return f"Prng(seed={self.seed})"


# ---------------------------------------------------------------------------
# kernels


def _batch_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a[:-2], b[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents do not broadcast: {a} x {b}") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast from 1."""
    if a.rank < 2 or b.rank < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    _batch_shape(a.shape, b.shape)
    return Tensor.adopt(np.matmul(a.data, b.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may match a trailing suffix of ``a``'s shape (bias add)."""
    if a.shape != b.shape:
        try:
            out_shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"add operands do not broadcast: {a.shape} + {b.shape}") from None
        if out_shape != a.shape and out_shape != b.shape:
            raise ShapeError(f"add operands do not broadcast: {a.shape} + {b.shape}")
    return Tensor.adopt(a.data + b.data)


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor.adopt(x.data * float(c))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return Tensor.adopt(x.data.reshape(shape).copy())


def transpose(x: Tensor, axis1: int, axis2: int) -> Tensor:
    """Swap two axes, materialising the result in row-major order."""
    return Tensor.adopt(np.swapaxes(x.data, axis1, axis2).copy())


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return Tensor.adopt(e / e.sum(axis=-1, keepdims=True))


def _check_norm_params(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> None:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    if not eps > 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise each last-axis slice (population variance), then apply gamma, beta."""
    _check_norm_params(x, gamma, beta, eps)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    xhat = centered / np.sqrt(var + eps)
    return Tensor.adopt(xhat * gamma.data + beta.data)


ACTIVATIONS = ("relu", "gelu")


def relu(x: Tensor) -> Tensor:
    return Tensor.adopt(np.maximum(x.data, 0.0))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    return Tensor.adopt(x.data * 0.5 * (1.0 + erf(x.data / _SQRT2)))


def gelu_derivative(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_uniform_init(fan_in: int, fan_out: int, rng: Prng) -> Tensor:
    """A ``fan_in x fan_out`` matrix of i.i.d. draws from U[-b, b], b = sqrt(6/(fan_in+fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    b = xavier_bound(fan_in, fan_out)
    return Tensor.adopt(rng.uniform(-b, b, (fan_in, fan_out)))


def as_ids(ids) -> np.ndarray:
    """Coerce token ids / positions to an int64 array, rejecting non-integers."""
    arr = np.asarray(ids)
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind == "f" and arr.size and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        elif arr.size == 0:
            arr = arr.astype(np.int64)
        else:
            raise TypeError(f"integer ids required, got dtype {arr.dtype}")
    return arr.astype(np.int64, copy=False)


def check_id_range(ids: np.ndarray, upper: int, what: str = "id") -> None:
    bad = (ids < 0) | (ids >= upper)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        value = int(ids[pos])
        err = IndexRangeError(f"{what} {value} at position {pos} outside [0, {upper})")
        err.value, err.position = value, pos
        raise err


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids``; output shape is ``ids.shape + (dim,)``."""
    if table.rank != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")
    ids = as_ids(ids)
    check_id_range(ids, table.shape[0])
    return Tensor.adopt(table.data[ids])


def dropout_mask(shape, rate: float, rng: Prng) -> np.ndarray:
    """Keep-mask already scaled by 1/(1-rate): entries are 0 or 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep * (1.0 / (1.0 - rate))
