"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor_core import Tape, Tensor, no_grad


def analytic_gradients(fn, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    with Tape() as tape:
        loss = fn(tensors)
    tape.backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


def numeric_gradients(fn, arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    out = {}
    base = {k: np.array(v, dtype=float) for k, v in arrays.items()}

    def value(current):
        with no_grad():
            return float(fn({k: Tensor(v) for k, v in current.items()}).data)

    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = value(base)
            flat[i] = keep - h
            down = value(base)
            flat[i] = keep
            g.reshape(-1)[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


SCALE_FLOOR = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||, 1e-6)``.

    The floor keeps gradients that are identically zero (finite differences
    return round-off of order 1e-11 there) from reading as a 100% error.
    """
    scale = max(np.linalg.norm(a), np.linalg.norm(b), SCALE_FLOOR)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn, arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, float]:
    """Relative error between tape and finite-difference gradients, per input."""
    ana = analytic_gradients(fn, arrays)
    num = numeric_gradients(fn, arrays, h)
    return {k: relative_error(ana[k], num[k]) for k in arrays}
