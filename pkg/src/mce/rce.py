"""Representation-capability losses: single-modal, subset and completion terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .coalition import enumerate_subsets
from .errors import TrainingDivergenceError
from .model import MultiModalModel
from .tensor_core import Tensor

EPS = 1e-8
DEFAULT_LAMBDAS = (1.0, 2.0, 1.0)


@dataclass
class SubsetPlan:
    """Feasible subsets of one batch.

    ``s_batch`` is sorted by bitmask; ``n_s[S]`` holds the sample indices whose
    present set contains ``S``. The flat ``pair_*`` arrays list every feasible
    (sample, subset) pair in subset-major order.
    """

    modality_count: int
    presence_masks: np.ndarray
    s_batch: list[int]
    n_s: dict[int, np.ndarray]
    pair_rows: np.ndarray = field(repr=False)
    pair_subsets: np.ndarray = field(repr=False)

    def s_drop(self, n: int, subset: int) -> int:
        """Present-but-dropped modalities of sample ``n`` under ``subset``."""
        return int(self.presence_masks[n]) & ~subset

    @property
    def pair_drops(self) -> np.ndarray:
        return self.presence_masks[self.pair_rows] & ~self.pair_subsets

    def pair_group_sizes(self) -> np.ndarray:
        """``|n_s|`` for the subset of each pair."""
        sizes = {s: len(v) for s, v in self.n_s.items()}
        return np.array([sizes[int(s)] for s in self.pair_subsets], dtype=float)


def presence_masks(E) -> np.ndarray:
    E = np.asarray(E)
    return (E.astype(np.int64) << np.arange(E.shape[1])).sum(axis=1)


def build_subset_plan(E, cap: int | None = None, rng: np.random.Generator | None = None) -> SubsetPlan:
    """Collect every non-empty subset that is feasible for at least one sample.

    With ``cap`` set and more feasible subsets than ``cap``, a uniform sample of
    ``cap`` subsets (without replacement) is kept.
    """
    E = np.asarray(E)
    M = E.shape[1]
    masks = presence_masks(E)
    subsets = sorted(set().union(*(enumerate_subsets(int(m)) for m in np.unique(masks))))
    if cap is not None and len(subsets) > cap:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = rng.choice(len(subsets), size=cap, replace=False)
        subsets = sorted(subsets[i] for i in keep)
    n_s = {s: np.flatnonzero((masks & s) == s) for s in subsets}
    rows = [n_s[s] for s in subsets]
    subs = [np.full(len(n_s[s]), s, dtype=np.int64) for s in subsets]
    return SubsetPlan(
        modality_count=M,
        presence_masks=masks,
        s_batch=subsets,
        n_s=n_s,
        pair_rows=np.concatenate(rows) if rows else np.zeros(0, dtype=np.intp),
        pair_subsets=np.concatenate(subs) if subs else np.zeros(0, dtype=np.int64),
    )


def _zero() -> Tensor:
    return Tensor(0.0)


def loss_task(model: MultiModalModel, h: Tensor, y, E) -> Tensor:
    """Mean cross-entropy of the main path (absent slots completed by reconstruction)."""
    return tc.softmax_cross_entropy(model.fuse_predict(model.complete(h, E)), y)


def loss_single(model: MultiModalModel, h: Tensor, y, E, A, B) -> Tensor:
    """Sum over modalities of ``A[m] B[m]`` times the mean unimodal cross-entropy.

    The mean runs over samples where the modality is present. Modalities with a
    zero weight or no present sample are skipped entirely.
    """
    E = np.asarray(E)
    y = np.asarray(y)
    weights = np.asarray(A, dtype=float) * np.asarray(B, dtype=float)
    terms = []
    for m in range(E.shape[1]):
        rows = np.flatnonzero(E[:, m])
        if weights[m] == 0.0 or rows.size == 0:
            continue
        ce = tc.softmax_cross_entropy(model.unimodal_logits(h, m, rows), y[rows])
        terms.append(tc.mul(ce, weights[m]))
    if not terms:
        return _zero()
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return total


def loss_sub(model: MultiModalModel, h: Tensor, y, plan: SubsetPlan, eps: float = EPS) -> Tensor:
    """Average over feasible subsets of the eps-guarded mean cross-entropy.

    Predictions use the raw encoder features restricted to each subset.
    """
    if not plan.s_batch:
        return _zero()
    rows = plan.pair_rows
    logits = model.fuse_predict(tc.take(h, rows, axis=0), plan.pair_subsets)
    per = tc.softmax_cross_entropy(logits, np.asarray(y)[rows], reduction="none")
    w = 1.0 / (len(plan.s_batch) * (plan.pair_group_sizes() + eps))
    return tc.sum(tc.mul(per, w))


def _slot_error(recon: Tensor, target: Tensor, norm: str) -> Tensor:
    diff_sq = tc.square(tc.sub(recon, target))
    if norm == "mse":
        return tc.mean(diff_sq, axis=-1)
    if norm == "l2":
        return tc.sqrt(tc.add(tc.sum(diff_sq, axis=-1), 1e-12))
    raise ValueError(f"unknown reconstruction norm {norm!r}")


def loss_aux(model: MultiModalModel, h: Tensor, plan: SubsetPlan, A, B, eps: float = EPS,
             norm: str = "mse", target: np.ndarray | None = None) -> Tensor:
    """Completion loss for modalities dropped from each feasible subset.

    For every (sample, subset) pair the slots outside the subset are zeroed,
    the reconstruction module refills them, and each dropped-but-present slot
    is compared with its detached encoder feature. Per-slot errors are weighted
    by ``A[m] B[m]`` and normalised by the dropped count (+eps), the subset's
    sample count and the number of subsets.

    ``target`` overrides the reconstruction target (N x M x D array); it
    defaults to the values of ``h`` and is never on the tape.
    """
    M = plan.modality_count
    weights = np.asarray(A, dtype=float) * np.asarray(B, dtype=float)
    if not plan.s_batch or not np.any(weights):
        return _zero()
    drops = plan.pair_drops
    drop_rows = ((drops[:, None] >> np.arange(M)) & 1).astype(float)
    n_drop = drop_rows.sum(axis=1)
    scale = 1.0 / (len(plan.s_batch) * plan.pair_group_sizes() * (n_drop + eps))
    W = drop_rows * weights[None, :] * scale[:, None]
    live = np.flatnonzero(W.sum(axis=1) > 0)
    if live.size == 0:
        return _zero()
    rows = plan.pair_rows[live]
    recon = model.reconstruct(tc.take(h, rows, axis=0), plan.pair_subsets[live])
    target = Tensor((h.data if target is None else np.asarray(target, dtype=float))[rows])
    err = _slot_error(recon, target, norm)
    return tc.sum(tc.mul(err, W[live]))


@dataclass
class LossBreakdown:
    task: Tensor
    single: Tensor
    sub: Tensor
    aux: Tensor
    total: Tensor
    lambdas: tuple[float, float, float]
    epsilon: float = EPS

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("task", "single", "sub", "aux", "total")}


def total_loss(task, single, sub, aux, lambdas=DEFAULT_LAMBDAS, epsilon: float = EPS) -> LossBreakdown:
    """``task + l_single * single + l_sub * sub + l_aux * aux``."""
    parts = {k: tc.as_tensor(v) for k, v in (("task", task), ("single", single), ("sub", sub), ("aux", aux))}
    for name, t in parts.items():
        v = float(t.data)
        if not np.isfinite(v):
            raise TrainingDivergenceError(name, v)
    ls, lb, la = (float(v) for v in lambdas)
    total = parts["task"]
    for coef, name in ((ls, "single"), (lb, "sub"), (la, "aux")):
        if coef != 0.0:
            total = tc.add(total, tc.mul(parts[name], coef))
    return LossBreakdown(parts["task"], parts["single"], parts["sub"], parts["aux"], total,
                         (ls, lb, la), epsilon)

