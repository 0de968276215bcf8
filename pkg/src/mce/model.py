"""Encode, reconstruct, fuse and decode for M vector modalities.

Feature tensors are N x M x D. A modality outside the presence (or subset)
mask occupies its slot as a zero vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import ConfigurationError, ContractError
from .tensor_core import Tensor


@dataclass
class ModelConfig:
    modality_count: int = 3
    input_dim: int = 16
    feature_dim: int = 8
    hidden_dim: int = 16
    class_count: int = 4
    heads: int = 2
    ffn_dim: int = 16
    pos_std: float = 0.02

    def validate(self):
        for name in ("modality_count", "input_dim", "feature_dim", "hidden_dim", "class_count", "heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive", field=name)
        if self.feature_dim % self.heads:
            raise ConfigurationError(
                f"feature_dim {self.feature_dim} not divisible by heads {self.heads}", field="heads")


def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def init_encoder(rng, d_in, hidden, d_out, prefix):
    return {
        f"{prefix}.W1": _he(rng, d_in, hidden), f"{prefix}.b1": np.zeros(hidden),
        f"{prefix}.W2": _he(rng, hidden, d_out), f"{prefix}.b2": np.zeros(d_out),
    }


def encoder_forward(params, prefix, x):
    h = tc.relu(tc.dense_forward(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return tc.dense_forward(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def subset_rows(subset, n: int, M: int) -> np.ndarray:
    """Expand a bitmask (shared) or per-row bitmasks / 0-1 matrix into an n x M float mask."""
    arr = np.asarray(subset)
    if arr.ndim == 2:
        rows = arr.astype(float)
    else:
        masks = np.broadcast_to(arr.astype(np.int64), (n,))
        rows = ((masks[:, None] >> np.arange(M)) & 1).astype(float)
    if rows.shape != (n, M):
        raise ContractError(f"subset mask shape {rows.shape} does not match batch ({n}, {M})")
    if np.any(rows.sum(axis=1) == 0):
        raise ContractError("subset must be non-empty for every row")
    return rows


class MultiModalModel:
    """Per-modality encoders, attention reconstruction, concat fusion, decoders.

    ``params`` maps dotted names to leaf tensors; group prefixes are ``enc{m}``,
    ``rec``, ``fuse``, ``dec`` and ``uni{m}`` (the per-modality decoders used
    by the single-modal loss).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng([int(seed), 101])
        M, Din, D, H, C = (config.modality_count, config.input_dim, config.feature_dim,
                           config.hidden_dim, config.class_count)
        raw: dict[str, np.ndarray] = {}
        for m in range(M):
            raw.update(init_encoder(rng, Din, H, D, f"enc{m}"))
        att_std = 1.0 / np.sqrt(D)
        for k in ("q", "k", "v", "o"):
            raw[f"rec.W{k}"] = rng.normal(0.0, att_std, size=(D, D))
            raw[f"rec.b{k}"] = np.zeros(D)
        raw["rec.W1"] = _he(rng, D, config.ffn_dim)
        raw["rec.b1"] = np.zeros(config.ffn_dim)
        raw["rec.W2"] = rng.normal(0.0, 1.0 / np.sqrt(config.ffn_dim), size=(config.ffn_dim, D))
        raw["rec.b2"] = np.zeros(D)
        raw["rec.pos"] = rng.normal(0.0, config.pos_std, size=(1, M, D))
        raw["fuse.W"] = _he(rng, M * D, D)
        raw["fuse.b"] = np.zeros(D)
        raw["dec.W"] = _he(rng, D, C)
        raw["dec.b"] = np.zeros(C)
        for m in range(M):
            raw[f"uni{m}.W"] = _he(rng, D, C)
            raw[f"uni{m}.b"] = np.zeros(C)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}

    # -- parameter plumbing --------------------------------------------------

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.split(".")[0] == prefix}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise ValueError("parameter names do not match the model")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k] = Tensor(v, requires_grad=True, name=k)

    def param_hash(self, prefix: str | None = None) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            if prefix is None or k.split(".")[0] == prefix:
                h.update(k.encode())
                h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    # -- forward pieces ----------------------------------------------------------

    def encode(self, x: np.ndarray, presence: np.ndarray) -> Tensor:
        """Encode every slot, then zero the absent ones."""
        x = np.asarray(x, dtype=float)
        presence = np.asarray(presence, dtype=float)
        N, M, _ = x.shape
        if presence.shape != (N, M):
            raise ContractError(f"presence shape {presence.shape} does not match inputs {x.shape[:2]}")
        D = self.config.feature_dim
        slots = [tc.reshape(encoder_forward(self.params, f"enc{m}", x[:, m, :]), (N, 1, D)) for m in range(M)]
        return tc.mul(tc.concat(slots, axis=1), presence[:, :, None])

    def reconstruct(self, features: Tensor, keep) -> Tensor:
        """Refine all M slots from the kept ones.

        Slots outside ``keep`` are zeroed, the positional encoding is added to
        every slot and one attention block mixes across the modality axis.
        """
        N, M, _ = features.shape
        keep_rows = subset_rows(keep, N, M)
        h = tc.add(tc.mul(features, keep_rows[:, :, None]), self.params["rec.pos"])
        rec = {k.split(".", 1)[1]: v for k, v in self.group("rec").items() if k != "rec.pos"}
        return tc.attention_block(h, self.config.heads, rec)

    def complete(self, features: Tensor, presence) -> Tensor:
        """Observed slots as encoded, absent slots taken from the reconstruction."""
        N, M, _ = features.shape
        rows = subset_rows(presence, N, M)[:, :, None]
        refined = self.reconstruct(features, rows[:, :, 0])
        return tc.add(tc.mul(features, rows), tc.mul(refined, 1.0 - rows))

    def fuse(self, features: Tensor, subset=None) -> Tensor:
        """Fused representation (N x D) from the slots in ``subset`` (all when None)."""
        N, M, D = features.shape
        if subset is not None:
            features = tc.mul(features, subset_rows(subset, N, M)[:, :, None])
        flat = tc.reshape(features, (N, M * D))
        return tc.relu(tc.dense_forward(flat, self.params["fuse.W"], self.params["fuse.b"]))

    def decode(self, fused: Tensor) -> Tensor:
        return tc.dense_forward(fused, self.params["dec.W"], self.params["dec.b"])

    def fuse_predict(self, features: Tensor, subset=None) -> Tensor:
        return self.decode(self.fuse(features, subset))

    def unimodal_logits(self, features: Tensor, m: int, rows=None) -> Tensor:
        N, M, D = features.shape
        slot = tc.reshape(tc.take(features, [m], axis=1), (N, D))
        if rows is not None:
            slot = tc.take(slot, rows, axis=0)
        return tc.dense_forward(slot, self.params[f"uni{m}.W"], self.params[f"uni{m}.b"])

    def task_logits(self, x, presence) -> Tensor:
        """Main prediction path: encode, complete absent slots, fuse all M."""
        h = self.encode(x, presence)
        return self.fuse_predict(self.complete(h, presence))

    def task_fused(self, x, presence) -> Tensor:
        h = self.encode(x, presence)
        return self.fuse(self.complete(h, presence))

    def encoder_features(self, m: int, x_m: np.ndarray) -> np.ndarray:
        """Modality ``m`` encoder output for raw inputs (no tape)."""
        return encoder_forward(self.params, f"enc{m}", np.asarray(x_m, dtype=float)).data


class FrozenUnimodal:
    """Read-only single-modality encoder + linear decoder."""

    def __init__(self, modality: int, params: dict[str, np.ndarray], accuracy: float | None = None):
        self.modality = modality
        frozen = {}
        for k, v in params.items():
            arr = np.array(v, dtype=float)
            arr.setflags(write=False)
            frozen[k] = arr
        self._params = frozen
        self.accuracy = accuracy

    @property
    def params(self):
        return dict(self._params)

    def logits(self, x_m: np.ndarray) -> np.ndarray:
        p = self._params
        h = np.maximum(x_m @ p["enc.W1"] + p["enc.b1"], 0.0) @ p["enc.W2"] + p["enc.b2"]
        return h @ p["dec.W"] + p["dec.b"]

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._params):
            h.update(k.encode())
            h.update(self._params[k].tobytes())
        return h.hexdigest()


def unimodal_predict(frozen: FrozenUnimodal, x: np.ndarray, presence: np.ndarray) -> np.ndarray:
    """Frozen logits for the rows where the modality is present.

    ``x`` is N x M x D_in. Asking about a row where the modality is absent is
    a contract violation.
    """
    m = frozen.modality
    present = np.asarray(presence)[:, m].astype(bool)
    if not present.all():
        raise ContractError(f"modality {m} absent for rows {np.flatnonzero(~present).tolist()}")
    return frozen.logits(np.asarray(x, dtype=float)[:, m, :])


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: MultiModalModel, path, step: int = 0, extra: dict | None = None):
    """Write ``<path>.bin`` (concatenated little-endian float64) and ``<path>.json`` manifest."""
    path = Path(path)
    names = sorted(model.params)
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for k in names:
            arr = np.ascontiguousarray(model.params[k].data, dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": k, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {
        "format": "mce-checkpoint-v1",
        "model_config": asdict(model.config),
        "seed": model.seed,
        "step": step,
        "params": entries,
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[MultiModalModel, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    model = MultiModalModel(ModelConfig(**manifest["model_config"]), seed=manifest["seed"])
    state = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    model.load_state(state)
    return model, manifest


def save_frozen(models: list[FrozenUnimodal], path):
    path = Path(path)
    arrays = {f"m{f.modality}.{k}": v for f in models for k, v in f.params.items()}
    np.savez(path.with_suffix(".npz"), **arrays)
    meta = {"modalities": [f.modality for f in models], "accuracy": [f.accuracy for f in models]}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_frozen(path) -> list[FrozenUnimodal]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    data = np.load(path.with_suffix(".npz"))
    out = []
    for m, acc in zip(meta["modalities"], meta["accuracy"]):
        prefix = f"m{m}."
        params = {k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)}
        out.append(FrozenUnimodal(m, params, acc))
    return out
