"""Representation-quality metrics, capability tables and the ablation grid."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class ReprQualityReport:
    intra_class_distance: float
    inter_class_distance: float
    ratio: float
    avg_cosine_consistency: float

    def as_row(self) -> dict:
        return {
            "intra_class_distance": self.intra_class_distance,
            "inter_class_distance": self.inter_class_distance,
            "ratio": self.ratio,
            "avg_cosine_consistency": self.avg_cosine_consistency,
        }


REPR_COLUMNS = ("intra_class_distance", "inter_class_distance", "ratio", "avg_cosine_consistency")


def _mean_pairwise(X: np.ndarray) -> float:
    n = len(X)
    sq = (X * X).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return float(np.sqrt(d2).sum() / (n * (n - 1)))


def repr_quality(features, labels) -> ReprQualityReport:
    """Cluster-quality summary of a feature matrix (rows = samples).

    * intra: mean over classes of the mean pairwise Euclidean distance within
      the class (classes with a single sample are skipped with a warning)
    * inter: mean pairwise Euclidean distance between class centroids
    * ratio: intra / inter
    * consistency: mean cosine similarity of each sample to its class centroid
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    intra, cents, cos = [], [], np.zeros(len(y))
    for c in classes:
        rows = np.flatnonzero(y == c)
        Xc = X[rows]
        centroid = Xc.mean(axis=0)
        cents.append(centroid)
        if len(rows) < 2:
            warnings.warn(f"class {c} has a single sample; left out of the intra-class distance", stacklevel=2)
        else:
            intra.append(_mean_pairwise(Xc))
        denom = np.linalg.norm(Xc, axis=1) * np.linalg.norm(centroid)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos[rows] = np.where(denom > 0, Xc @ centroid / np.where(denom > 0, denom, 1.0), 0.0)
    if not intra:
        raise ValueError("need at least one class with two or more samples")
    intra_d = float(np.mean(intra))
    inter_d = _mean_pairwise(np.array(cents))
    ratio = intra_d / inter_d if inter_d > 0 else float("inf")
    return ReprQualityReport(intra_d, inter_d, ratio, float(np.clip(cos.mean(), -1.0, 1.0)))


CAPABILITY_COLUMNS = ("epoch", "modality", "capability", "upperbound")


def capability_report(probe_rows, upperbounds) -> list[dict]:
    """Join logged probe accuracies with each modality's frozen-model ceiling.

    ``probe_rows`` carry ``epoch, modality, capability``; ``upperbounds`` maps
    modality -> accuracy. Rows come back sorted by (modality, epoch).
    """
    out = []
    for r in sorted(probe_rows, key=lambda r: (int(r["modality"]), int(r["epoch"]))):
        m = int(r["modality"])
        out.append({"epoch": int(r["epoch"]), "modality": m, "capability": float(r["capability"]),
                    "upperbound": float(upperbounds[m])})
    return out


# Component ablation rows: (A, B, single, sub, aux).
ABLATION_ROWS = {
    "a": (False, False, False, False, False),
    "b": (False, False, True, False, False),
    "c": (False, False, False, True, False),
    "d": (False, False, False, False, True),
    "e": (False, False, True, True, False),
    "f": (False, False, True, False, True),
    "g": (False, False, False, True, True),
    "h": (False, False, True, True, True),
    "i": (True, False, True, True, True),
    "j": (False, True, True, True, True),
    "k": (True, True, True, False, False),
    "l": (True, True, False, False, True),
    "m": (True, True, True, True, True),
}

ABLATION_COLUMNS = ("row", "A", "B", "single", "sub", "aux", "seed", "average_accuracy")


def ablation_settings(row: str, lambdas) -> dict:
    """TrainConfig overrides for one ablation row; a disabled loss gets lambda 0."""
    use_A, use_B, s, b, a = ABLATION_ROWS[row]
    ls, lb, la = lambdas
    return {"use_A": use_A, "use_B": use_B,
            "lambdas": (ls if s else 0.0, lb if b else 0.0, la if a else 0.0)}
