"""Reverse-mode differentiation over the tensor kernels.

Model code calls kernels through an ``Ops`` object. The module-level
``EAGER`` instance just evaluates; a :class:`Tape` evaluates *and* records
each call so :func:`backward` can replay it in reverse::

    tape = Tape()
    w = tape.watch("w", w)
    loss = tape.cross_entropy(tape.matmul(x, w), targets)
    grads = backward(tape, loss)      # {"w": Tensor}
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as K
from .errors import ContractError, ShapeError
from .tensor import Prng, Tensor

RULES = (
    "matmul",
    "add",
    "scale",
    "softmax_lastdim",
    "layer_norm",
    "relu",
    "gelu",
    "embedding_gather",
    "reshape",
    "transpose",
    "dropout",
    "cross_entropy",
)


@dataclass
class Record:
    rule: str
    inputs: tuple
    output: Tensor
    ctx: dict = field(default_factory=dict)


def cross_entropy_forward(logits: Tensor, targets, mask=None) -> tuple[Tensor, dict]:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``mask`` (same shape as ``targets``, boolean) restricts the mean to the
    selected positions. Returns the loss and the cached probabilities.
    """
    targets = K.as_ids(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    K.check_id_range(targets, logits.shape[-1], what="target")
    if mask is None:
        weights = np.ones(targets.shape)
    else:
        weights = np.asarray(mask, dtype=np.float64)
        if weights.shape != targets.shape:
            raise ShapeError(f"mask shape {weights.shape} does not match targets {targets.shape}")
    count = weights.sum()
    if count <= 0:
        raise ContractError("cross_entropy mask selects no positions")

    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum() / count
    ctx = {"probs": np.exp(logp), "targets": targets, "weights": weights, "count": count}
    return Tensor.adopt(np.array([loss])), ctx


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    return cross_entropy_forward(logits, targets, mask)[0]


class Ops:
    """Differentiable kernel surface. This base class evaluates without recording."""

    def _record(self, rule: str, inputs: tuple, output: Tensor, **ctx) -> Tensor:
        return output

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return self._record("matmul", (a, b), K.matmul(a, b))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._record("add", (a, b), K.add(a, b))

    def scale(self, x: Tensor, c: float) -> Tensor:
        return self._record("scale", (x,), K.scale(x, c), c=float(c))

    def reshape(self, x: Tensor, shape) -> Tensor:
        return self._record("reshape", (x,), K.reshape(x, shape))

    def transpose(self, x: Tensor, axis1: int, axis2: int) -> Tensor:
        return self._record("transpose", (x,), K.transpose(x, axis1, axis2), axes=(axis1, axis2))

    def softmax_lastdim(self, x: Tensor) -> Tensor:
        return self._record("softmax_lastdim", (x,), K.softmax_lastdim(x))

    def layer_norm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
        return self._record("layer_norm", (x, gamma, beta), K.layer_norm(x, gamma, beta, eps), eps=eps)

    def activation(self, x: Tensor, kind: str) -> Tensor:
        out = K.activation(x, kind)
        return self._record(kind, (x,), out)

    def relu(self, x: Tensor) -> Tensor:
        return self.activation(x, "relu")

    def gelu(self, x: Tensor) -> Tensor:
        return self.activation(x, "gelu")

    def embedding_gather(self, table: Tensor, ids) -> Tensor:
        ids = K.as_ids(ids)
        return self._record("embedding_gather", (table,), K.embedding_gather(table, ids), ids=ids)

    def dropout(self, x: Tensor, rate: float, rng: Prng) -> Tensor:
        """Train-time inverted dropout. The sampled mask is kept for backward."""
        mask = K.dropout_mask(x.shape, rate, rng)
        return self._record("dropout", (x,), Tensor.adopt(x.data * mask), mask=mask)

    def cross_entropy(self, logits: Tensor, targets, mask=None) -> Tensor:
        loss, ctx = cross_entropy_forward(logits, targets, mask)
        return self._record("cross_entropy", (logits,), loss, **ctx)


EAGER = Ops()


class Tape(Ops):
    """Ordered record of kernel applications, in evaluation (topological) order.

    Tensors are tracked by object identity, so the tape keeps every operand
    alive until it is discarded. Single-owner: do not record from two threads.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.leaves: dict[str, Tensor] = {}

    def watch(self, name: str, t: Tensor) -> Tensor:
        """Register ``t`` as a named leaf whose gradient :func:`backward` reports."""
        if name in self.leaves and self.leaves[name] is not t:
            raise ContractError(f"leaf name {name!r} already bound to a different tensor")
        self.leaves[name] = t
        return t

    def watch_all(self, named: dict[str, Tensor]) -> None:
        for name, t in named.items():
            self.watch(name, t)

    def _record(self, rule, inputs, output, **ctx):
        self.records.append(Record(rule, inputs, output, ctx))
        return output

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# backward rules: (record, upstream gradient) -> one gradient per input


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` over the axes that were broadcast."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bw_matmul(r: Record, g: np.ndarray):
    a, b = r.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _bw_add(r: Record, g: np.ndarray):
    a, b = r.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_scale(r: Record, g: np.ndarray):
    return (g * r.ctx["c"],)


def _bw_reshape(r: Record, g: np.ndarray):
    return (g.reshape(r.inputs[0].shape),)


def _bw_transpose(r: Record, g: np.ndarray):
    a1, a2 = r.ctx["axes"]
    return (np.swapaxes(g, a1, a2),)


def _bw_softmax(r: Record, g: np.ndarray):
    y = r.output.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _bw_layer_norm(r: Record, g: np.ndarray):
    x, gamma, _ = r.inputs
    eps = r.ctx["eps"]
    d = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.rank - 1))
    g_gamma = (g * xhat).sum(axis=lead)
    g_beta = g.sum(axis=lead)
    gx_hat = g * gamma.data
    gx = (inv_std / d) * (
        d * gx_hat
        - gx_hat.sum(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, g_gamma, g_beta


def _bw_relu(r: Record, g: np.ndarray):
    return (g * (r.inputs[0].data > 0),)


def _bw_gelu(r: Record, g: np.ndarray):
    return (g * K.gelu_derivative(r.inputs[0].data),)


def _bw_embedding(r: Record, g: np.ndarray):
    table = r.inputs[0]
    gt = np.zeros(table.shape)
    np.add.at(gt, r.ctx["ids"], g)
    return (gt,)


def _bw_dropout(r: Record, g: np.ndarray):
    return (g * r.ctx["mask"],)


def _bw_cross_entropy(r: Record, g: np.ndarray):
    probs, targets = r.ctx["probs"], r.ctx["targets"]
    weights, count = r.ctx["weights"], r.ctx["count"]
    d = probs.copy()
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1.0, -1)
    return (d * (weights / count)[..., None] * g.reshape(-1)[0],)


_BACKWARD = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "scale": _bw_scale,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
    "softmax_lastdim": _bw_softmax,
    "layer_norm": _bw_layer_norm,
    "relu": _bw_relu,
    "gelu": _bw_gelu,
    "embedding_gather": _bw_embedding,
    "dropout": _bw_dropout,
    "cross_entropy": _bw_cross_entropy,
}
assert set(_BACKWARD) == set(RULES)


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Gradient of the scalar ``loss`` with respect to every watched leaf.

    Leaves that do not influence ``loss`` get zero gradients. The tape is not
    modified, so calling this twice gives identical results.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a single-element loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    leaf_ids = {id(t) for t in tape.leaves.values()}
    if id(loss) not in produced and id(loss) not in leaf_ids:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for r in reversed(tape.records):
        g = grads.pop(id(r.output), None) if id(r.output) not in leaf_ids else grads.get(id(r.output))
        if g is None:
            continue
        for inp, gi in zip(r.inputs, _BACKWARD[r.rule](r, g)):
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {
        name: Tensor.adopt(grads[id(t)]) if id(t) in grads else Tensor.zeros(*t.shape)
        for name, t in tape.leaves.items()
    }


def relative_error(analytic: float, numeric: float) -> float:
    """``|a - f| / max(|a|, |f|, 1e-8)``; the floor keeps near-zero gradients sane."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def sgd_step(params, grads: dict[str, Tensor], lr: float):
    """Plain gradient descent: ``theta - lr * g`` for every named parameter.

    ``params`` is any parameter container exposing ``named()`` and
    ``with_named(mapping)``; a new container is returned.
    """
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    named = params.named()
    missing = sorted(set(named) - set(grads))
    if missing:
        raise ContractError(f"no gradient for parameters: {', '.join(missing)}")
    updated = {}
    for name, theta in named.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        updated[name] = Tensor.adopt(theta.data - lr * g.data)
    return params.with_named(updated)


__all__ = [
    "EAGER",
    "Ops",
    "Record",
    "RULES",
    "Tape",
    "backward",
    "cross_entropy",
    "relative_error",
    "sgd_step",
]
