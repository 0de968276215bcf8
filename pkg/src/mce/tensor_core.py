"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions. When a :class:`Tape` is active and at least
one input requires a gradient, the operation appends a node to the tape;
otherwise it is a pure numpy computation. ``Tape.backward`` replays the nodes
in reverse and stores ``.grad`` on every tensor that requires one.

    >>> W = Tensor(np.eye(2), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mean(dense_forward(Tensor([[1.0, 2.0]]), W, Tensor([0.0, 0.0])))
    >>> tape.backward(loss)
    >>> W.grad.tolist()
    [[0.5, 0.5], [1.0, 1.0]]
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError

_ids = itertools.count(1)
_tape_stack: list["Tape | None"] = []

PROB_FLOOR = 1e-12


class Tensor:
    """Immutable dense array of doubles.

    ``grad_id`` is the key under which the tape tracks this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "grad_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.grad_id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Skips the defensive copy for freshly computed results.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.grad_id = next(_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records operations in execution order for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        for i in range(len(_tape_stack) - 1, -1, -1):
            if _tape_stack[i] is self:
                del _tape_stack[i]
                break
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reached.

        Returns the gradient table keyed by ``grad_id``.
        """
        if seed is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {loss.grad_id: np.asarray(seed, dtype=np.float64)}
        touched: dict[int, Tensor] = {loss.grad_id: loss}
        for node in reversed(self.nodes):
            g = grads.get(node.output.grad_id)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = inp.grad_id
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    touched[key] = inp
        for key, t in touched.items():
            t.grad = grads[key]
        return grads


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class no_grad:
    """Suspend recording, even inside an active tape."""

    def __enter__(self):
        _tape_stack.append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _finish(op: str, inputs, out: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(op, inputs, result, backward)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _finish("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _finish("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _finish("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def activation_relu(x) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    on = x.data > 0
    return _finish("relu", (x,), np.where(on, x.data, 0.0), lambda g: (g * on,))


relu = activation_relu


def square(x) -> Tensor:
    x = as_tensor(x)
    return _finish("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("sqrt needs strictly positive input")
    r = np.sqrt(x.data)
    return _finish("sqrt", (x,), r, lambda g: (0.5 * g / r,))


# -- reductions and shape ------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _finish("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _finish("swapaxes", (x,), np.swapaxes(x.data, a1, a2), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _finish("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
                   lambda g: np.split(g, cuts, axis=axis))


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)

    def back(g):
        gx = np.zeros(x.shape)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _finish("take", (x,), np.take(x.data, idx, axis=axis), back)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul operands a{a.shape} and b{b.shape} do not align")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("matmul", (a, b), a.data @ b.data, back)


def dense_forward(x, W, b) -> Tensor:
    """Affine map ``x @ W + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2:
        raise DimensionError(f"dense weight W must be 2-D, got W{W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"dense input x{x.shape} does not match weight W{W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"dense bias b{b.shape} does not match weight W{W.shape}")
    x2 = x.data.reshape(-1, W.shape[0])

    def back(g):
        g2 = g.reshape(-1, W.shape[1])
        return (g2 @ W.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    out = (x2 @ W.data + b.data).reshape(x.shape[:-1] + (W.shape[1],))
    return _finish("dense", (x, W, b), out, back)


# -- probabilities and losses ---------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", (x,), p, back)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of row-wise softmax against integer class labels.

    ``reduction="none"`` returns the per-row losses.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")
    B, C = logits.shape
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    if y.shape[0] != B:
        raise DimensionError(f"{y.shape[0]} labels for {B} logit rows")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    p = softmax_probs(logits.data)
    rows = np.arange(B)
    picked = p[rows, y]
    per = -np.log(np.maximum(picked, PROB_FLOOR))
    # Below the clamp the loss is flat, so its gradient is zero.
    live = picked > PROB_FLOOR

    def grad_rows(gvec):
        d = p.copy()
        d[rows, y] -= 1.0
        return d * (gvec * live)[:, None]

    if reduction == "none":
        return _finish("cross_entropy", (logits,), per, lambda g: (grad_rows(g),))
    if reduction == "mean":
        return _finish("cross_entropy", (logits,), np.asarray(per.mean() if B else 0.0),
                       lambda g: (grad_rows(np.full(B, float(g) / B)),))
    raise ValueError(f"unknown reduction {reduction!r}")


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse operands a{a.shape} and b{b.shape} differ in shape")
    return mean(square(sub(a, b)))


# -- attention -----------------------------------------------------------------

ATTENTION_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "W1", "b1", "W2", "b2")


def multi_head_attention(x, heads: int, params) -> Tensor:
    """Scaled dot-product self-attention over the second-to-last axis."""
    x = as_tensor(x)
    *lead, M, D = x.shape
    if heads < 1 or D % heads:
        raise ConfigurationError(f"feature width {D} is not divisible by {heads} heads", field="heads")
    dh = D // heads

    def split(t):
        return swapaxes(reshape(t, (*lead, M, heads, dh)), -3, -2)

    q = split(dense_forward(x, params["Wq"], params["bq"]))
    k = split(dense_forward(x, params["Wk"], params["bk"]))
    v = split(dense_forward(x, params["Wv"], params["bv"]))
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    mixed = matmul(softmax(scores, axis=-1), v)
    merged = reshape(swapaxes(mixed, -3, -2), (*lead, M, D))
    return dense_forward(merged, params["Wo"], params["bo"])


def attention_block(x, heads: int, params) -> Tensor:
    """Self-attention followed by a residual two-layer feed-forward net.

    ``y = FFN(a) + a`` with ``a = MHSA(x, x, x)``; the residual wraps only the
    feed-forward stage. Any positional term must already be added to ``x``.
    """
    a = multi_head_attention(x, heads, params)
    hidden = activation_relu(dense_forward(a, params["W1"], params["b1"]))
    return add(dense_forward(hidden, params["W2"], params["b2"]), a)
