"""Learning-capability factors: dataset speed factor A and batch factor B.

A balances how often each modality is seen over the whole dataset. B is the
per-batch gap between a frozen unimodal model's correct count and the
modality's summed Shapley contribution inside the joint model, divided by the
modality's present count and clipped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .coalition import CoalitionGame, enumerate_subsets, exact_shapley, mc_shapley, popcount
from .errors import ConfigurationError, ContractError
from .model import FrozenUnimodal, MultiModalModel
from .tensor_core import softmax_probs


@dataclass
class LceState:
    A: np.ndarray
    phi: np.ndarray
    U: np.ndarray
    delta: np.ndarray
    B: np.ndarray
    present_count: np.ndarray


def factor_A_raw(E) -> np.ndarray:
    """``N / present_count[m]`` per modality."""
    E = np.asarray(E)
    counts = E.sum(axis=0)
    for m in np.flatnonzero(counts == 0):
        raise ConfigurationError(f"modality {m} is absent from every sample", field="missing_rates")
    return E.shape[0] / counts.astype(float)


def compute_factor_A(E, normalize: bool = True) -> np.ndarray:
    raw = factor_A_raw(E)
    return raw / raw.mean() if normalize else raw


def sample_accuracy(logits: np.ndarray, labels: np.ndarray, soft: bool = False) -> np.ndarray:
    """Per-row accuracy: 0/1 argmax hit (ties go to the lowest class) or true-class probability."""
    labels = np.asarray(labels)
    if soft:
        return softmax_probs(logits)[np.arange(len(labels)), labels]
    return (np.argmax(logits, axis=1) == labels).astype(float)


def coalition_table(model: MultiModalModel, x, E, y, soft: bool = False) -> np.ndarray:
    """Coalition values ``v_n(S)`` for every sample and every mask ``S``.

    Returns an N x 2**M array; entries for masks that are not subsets of the
    sample's present set are NaN and ``v_n(empty) = 0``. Runs without a tape on
    the raw encoder features.
    """
    E = np.asarray(E)
    N, M = E.shape
    masks = (E.astype(np.int64) << np.arange(M)).sum(axis=1)
    table = np.full((N, 1 << M), np.nan)
    table[:, 0] = 0.0
    with tc.no_grad():
        h = model.encode(x, E)
    rows, subs = [], []
    for s in range(1, 1 << M):
        ok = np.flatnonzero((masks & s) == s)
        rows.append(ok)
        subs.append(np.full(ok.size, s))
    rows = np.concatenate(rows)
    subs = np.concatenate(subs)
    if rows.size:
        with tc.no_grad():
            logits = model.fuse_predict(tc.take(h, rows, axis=0), subs).data
        table[rows, subs] = sample_accuracy(logits, np.asarray(y)[rows], soft)
    return table


def coalition_value(model: MultiModalModel, x_n, e_n, y_n, subset: int, soft: bool = False) -> float:
    """``v_n(S)`` for one sample; ``S`` must be a subset of its present modalities."""
    e_n = np.asarray(e_n)
    M = e_n.size
    present = int((e_n.astype(np.int64) << np.arange(M)).sum())
    if subset == 0:
        return 0.0
    if subset & ~present:
        raise ContractError(f"subset {subset:#b} is not available in presence {present:#b}")
    with tc.no_grad():
        h = model.encode(np.asarray(x_n, dtype=float)[None], e_n[None])
        logits = model.fuse_predict(h, subset).data
    return float(sample_accuracy(logits, np.array([y_n]), soft)[0])


def batch_shapley(table: np.ndarray, E, exact_threshold: int = 10, K: int = 100,
                  rng: np.random.Generator | None = None, return_per_sample: bool = False):
    """Sum over samples of each sample's Shapley vector on its present modalities.

    Exact enumeration is used when a sample has at most ``exact_threshold``
    present modalities, permutation sampling with ``K`` orderings otherwise.
    """
    E = np.asarray(E)
    N, M = E.shape
    masks = (E.astype(np.int64) << np.arange(M)).sum(axis=1)
    per = np.zeros((N, M))
    memo: dict[tuple, np.ndarray] = {}
    for n in range(N):
        restrict = int(masks[n])
        if restrict == 0:
            continue
        row = table[n]
        if popcount(restrict) <= exact_threshold:
            key = (restrict, row[[0] + enumerate_subsets(restrict)].tobytes())
            if key not in memo:
                memo[key] = exact_shapley(CoalitionGame(M, row.__getitem__, empty_value=0.0), restrict).phi
            per[n] = memo[key]
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            per[n] = mc_shapley(CoalitionGame(M, row.__getitem__, empty_value=0.0), restrict, K=K, rng=rng).phi
    phi = per.sum(axis=0)
    return (phi, per) if return_per_sample else phi


def frozen_accuracy_table(frozen: list[FrozenUnimodal], x, E, y, soft: bool = False) -> np.ndarray:
    """N x M per-sample accuracy of each frozen unimodal model; 0 where absent."""
    E = np.asarray(E)
    N, M = E.shape
    out = np.zeros((N, M))
    by_mod = {f.modality: f for f in frozen}
    for m in range(M):
        rows = np.flatnonzero(E[:, m])
        if rows.size == 0:
            continue
        logits = by_mod[m].logits(np.asarray(x, dtype=float)[rows, m, :])
        out[rows, m] = sample_accuracy(logits, np.asarray(y)[rows], soft)
    return out


def batch_upperbound(frozen_table: np.ndarray, E) -> np.ndarray:
    """Summed frozen-model accuracy over the batch rows where each modality is present."""
    return (np.asarray(frozen_table) * np.asarray(E)).sum(axis=0)


def compute_factor_B(phi, U, present_count) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(delta, B)`` with ``delta = U - phi`` and ``B = max(delta, 0) / count``.

    ``B`` is 0 wherever the modality is absent from the batch.
    """
    phi = np.asarray(phi, dtype=float)
    U = np.asarray(U, dtype=float)
    counts = np.asarray(present_count, dtype=float)
    delta = U - phi
    B = np.zeros_like(delta)
    ok = (delta > 0) & (counts > 0)
    B[ok] = delta[ok] / counts[ok]
    return delta, B


def compute_lce_state(model: MultiModalModel, x, E, y, frozen_table, A, *, soft: bool = False,
                      exact_threshold: int = 10, K: int = 100, rng=None) -> LceState:
    E = np.asarray(E)
    table = coalition_table(model, x, E, y, soft=soft)
    phi = batch_shapley(table, E, exact_threshold=exact_threshold, K=K, rng=rng)
    U = batch_upperbound(frozen_table, E)
    counts = E.sum(axis=0)
    delta, B = compute_factor_B(phi, U, counts)
    return LceState(np.asarray(A, dtype=float), phi, U, delta, B, counts)
