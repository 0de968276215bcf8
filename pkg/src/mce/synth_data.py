"""Synthetic multi-modal classification data with per-modality missingness.

Each modality is a class-conditional Gaussian: ``x_m = W_m @ onehot(y) +
noise / snr[m]`` with ``W_m`` drawn once per dataset seed (entries
N(0, 1/D_in), so class means sit about sqrt(2) apart and ``snr`` directly
controls separability).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError


@dataclass
class SynthConfig:
    modality_count: int = 3
    class_count: int = 4
    feature_dim: int = 16
    samples: int = 2000
    snr: tuple[float, ...] = (5.0, 2.0, 1.0)
    missing_rates: tuple[float, ...] = (0.2, 0.5, 0.8)
    seed: int = 0

    def validate(self):
        M = self.modality_count
        if M < 2:
            raise ConfigurationError("modality_count must be >= 2", field="modality_count")
        if self.class_count < 2:
            raise ConfigurationError("class_count must be >= 2", field="class_count")
        if self.samples < 1:
            raise ConfigurationError("samples must be >= 1", field="samples")
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be >= 1", field="feature_dim")
        if len(self.snr) != M or any(not s > 0 for s in self.snr):
            raise ConfigurationError(f"snr needs {M} positive entries, got {self.snr}", field="snr")
        check_rates(self.missing_rates, M)


def check_rates(rates, M):
    if len(rates) != M:
        raise ConfigurationError(f"missing_rates needs {M} entries, got {len(rates)}", field="missing_rates")
    for r in rates:
        if not 0.0 <= r < 1.0:
            raise ConfigurationError(f"missing rate {r} outside [0, 1)", field="missing_rates")


@dataclass
class Dataset:
    """Inputs ``x`` (N x M x D_in), presence ``E`` (N x M, 0/1) and labels ``y``.

    Inputs of absent modalities are stored as zeros.
    """

    x: np.ndarray
    E: np.ndarray
    y: np.ndarray
    class_count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.int8)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[:2] != self.E.shape or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"inconsistent shapes x{self.x.shape} E{self.E.shape} y{self.y.shape}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def modality_count(self) -> int:
        return self.x.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[2]

    def masks(self) -> np.ndarray:
        """Per-sample presence as an integer bitmask (modality m is bit m)."""
        return (self.E.astype(np.int64) << np.arange(self.modality_count)).sum(axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.E[idx], self.y[idx], self.class_count, dict(self.meta))

    def with_presence(self, E) -> "Dataset":
        E = np.asarray(E, dtype=np.int8)
        return Dataset(self.x * E[:, :, None], E, self.y, self.class_count, dict(self.meta))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.x, self.E, self.y):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _rng(seed, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def mixing_matrices(config: SynthConfig) -> np.ndarray:
    """The fixed per-modality class-mean matrices, shape M x D_in x C."""
    rng = _rng(config.seed, 0)
    D, C = config.feature_dim, config.class_count
    return rng.normal(0.0, 1.0 / np.sqrt(D), size=(config.modality_count, D, C))


def sample_complete(config: SynthConfig, n: int, stream: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` fully observed samples; ``stream`` separates independent draws."""
    config.validate()
    W = mixing_matrices(config)
    rng = _rng(config.seed, stream)
    y = rng.integers(0, config.class_count, size=n)
    noise = rng.standard_normal((n, config.modality_count, config.feature_dim))
    means = np.transpose(W[:, :, y], (2, 0, 1))
    x = means + noise / np.asarray(config.snr, dtype=float)[None, :, None]
    return x, y


def calibrated_keep(rates) -> np.ndarray:
    """Per-entry presence probabilities ``q`` whose marginals, conditioned on a
    non-empty row, equal ``1 - rates``.

    Redrawing empty rows inflates each marginal by ``1 / P(row non-empty)``, so
    ``q = (1 - r) * Z`` with ``Z = 1 - prod(1 - q)`` solved by bisection. No such
    ``q`` exists when ``sum(1 - r) <= 1``; the raw ``1 - r`` is used there and the
    observed marginals stay biased upward.
    """
    k = 1.0 - np.asarray(rates, dtype=float)
    if k.sum() <= 1.0 or np.any(k == 1.0):
        return k

    def excess(z):
        return 1.0 - np.prod(1.0 - k * z) - z

    lo, hi = 1e-12, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return k * hi


def apply_missing(n_or_dataset, rates, seed) -> np.ndarray:
    """Independent per-entry dropout; observed missing fraction of modality m is ``rates[m]``.

    Rows that come out all-absent are redrawn until at least one modality is
    present, with the per-entry rates pre-compensated for that redraw (see
    ``calibrated_keep``).
    """
    n = n_or_dataset.n if isinstance(n_or_dataset, Dataset) else int(n_or_dataset)
    rates = np.asarray(rates, dtype=float)
    M = rates.size
    check_rates(rates, M)
    rng = _rng(seed, 2)
    keep = calibrated_keep(rates)
    E = (rng.random((n, M)) < keep).astype(np.int8)
    limit = 10 * max(n, 1)
    for i in np.flatnonzero(E.sum(axis=1) == 0):
        for _ in range(limit):
            row = (rng.random(M) < keep).astype(np.int8)
            if row.any():
                E[i] = row
                break
        else:
            raise ConfigurationError(
                f"missing rates {rates.tolist()} leave row {i} empty after {limit} redraws",
                field="missing_rates")
    return E


def generate(config: SynthConfig) -> Dataset:
    """Training data: ``config.samples`` draws with the configured missingness."""
    config.validate()
    x, y = sample_complete(config, config.samples, stream=1)
    E = apply_missing(config.samples, config.missing_rates, config.seed)
    meta = {"seed": config.seed, "split": "train", "config": asdict(config)}
    return Dataset(x, np.ones_like(E), y, config.class_count, meta).with_presence(E)


def generate_test(config: SynthConfig, n: int) -> Dataset:
    """Held-out, fully observed samples from the same class-mean matrices."""
    x, y = sample_complete(config, n, stream=3)
    E = np.ones((n, config.modality_count), dtype=np.int8)
    return Dataset(x, E, y, config.class_count, {"seed": config.seed, "split": "test", "config": asdict(config)})


# -- serialization ---------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    """Write ``<path>.bin`` (float64 x, int8 E, int64 y, little-endian) and ``<path>.json``."""
    path = Path(path)
    header = {
        "format": "mce-dataset-v1",
        "n": ds.n,
        "modality_count": ds.modality_count,
        "feature_dim": ds.feature_dim,
        "class_count": ds.class_count,
        "layout": ["x:<f8", "E:i1", "y:<i8"],
        "meta": ds.meta,
    }
    with open(path.with_suffix(".bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.E, dtype="i1").tobytes())
        fh.write(np.ascontiguousarray(ds.y, dtype="<i8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    h = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    n, M, D = h["n"], h["modality_count"], h["feature_dim"]
    raw = path.with_suffix(".bin").read_bytes()
    nx, ne = n * M * D * 8, n * M
    x = np.frombuffer(raw[:nx], dtype="<f8").reshape(n, M, D).astype(np.float64)
    E = np.frombuffer(raw[nx:nx + ne], dtype="i1").reshape(n, M).copy()
    y = np.frombuffer(raw[nx + ne:], dtype="<i8").astype(np.int64)
    return Dataset(x, E, y, h["class_count"], h.get("meta", {}))


def export_csv(ds: Dataset, path) -> None:
    """One row per sample: label, presence flags, then every input feature."""
    M, D = ds.modality_count, ds.feature_dim
    cols = ["label"] + [f"present_{m}" for m in range(M)] + [f"x_{m}_{d}" for m in range(M) for d in range(D)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(ds.n):
            vals = [str(int(ds.y[i]))] + [str(int(e)) for e in ds.E[i]] + [repr(float(v)) for v in ds.x[i].ravel()]
            fh.write(",".join(vals) + "\n")
