"""Unimodal pretraining, the joint MCE training loop, evaluation and probes."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .coalition import enumerate_subsets, members
from .errors import ConfigurationError, TrainingDivergenceError
from .lce import LceState, compute_factor_A, compute_lce_state, frozen_accuracy_table
from .model import FrozenUnimodal, ModelConfig, MultiModalModel, encoder_forward, init_encoder, save_checkpoint
from .rce import build_subset_plan, loss_aux, loss_single, loss_sub, loss_task, total_loss
from .synth_data import Dataset
from .tensor_core import Tape, Tensor

log = logging.getLogger(__name__)

SHUFFLE_STREAM = 7


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    lambdas: tuple[float, float, float] = (1.0, 2.0, 1.0)
    epsilon: float = 1e-8
    use_A: bool = True
    use_B: bool = True
    mc_K: int = 100
    exact_threshold: int = 10
    soft_accuracy: bool = False
    recon_norm: str = "mse"
    subset_cap: int = 64
    seed: int = 0
    pretrain_epochs: int = 40
    pretrain_lr: float = 3e-3
    probe_steps: int = 300
    probe_lr: float = 0.05
    probe_every: int = 0
    eval_every: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0", field="learning_rate")
        for name in ("epochs", "batch_size", "mc_K", "pretrain_epochs", "probe_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1", field=name)
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}", field="optimizer")
        if len(self.lambdas) != 3 or any(l < 0 for l in self.lambdas):
            raise ConfigurationError("lambdas needs three non-negative values", field="lambdas")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0", field="epsilon")
        if self.recon_norm not in ("mse", "l2"):
            raise ConfigurationError(f"unknown recon_norm {self.recon_norm!r}", field="recon_norm")

    @property
    def lce_active(self) -> bool:
        return self.use_A or self.use_B


def baseline_config(config: TrainConfig) -> TrainConfig:
    """Task-loss-only counterpart of ``config``."""
    return replace(config, lambdas=(0.0, 0.0, 0.0), use_A=False, use_B=False)


# -- optimisers ------------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, Tensor]):
        for k, p in params.items():
            if p.grad is not None:
                params[k] = Tensor(p.data - self.lr * p.grad, requires_grad=True, name=k)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] = Tensor(p.data - upd, requires_grad=True, name=k)


def make_optimizer(kind: str, lr: float):
    return Adam(lr) if kind == "adam" else SGD(lr)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- run log -----------------------------------------------------------------------


LOSS_COLUMNS = ("step", "epoch", "task", "single", "sub", "aux", "total")
FACTOR_COLUMNS = ("step", "modality", "present_count", "U", "phi", "delta", "B")
EVAL_COLUMNS = ("epoch", "subset", "samples", "accuracy")
PROBE_COLUMNS = ("epoch", "modality", "capability")


@dataclass
class RunLog:
    loss_rows: list[dict] = field(default_factory=list)
    factor_rows: list[dict] = field(default_factory=list)
    eval_rows: list[dict] = field(default_factory=list)
    probe_rows: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    A: np.ndarray | None = None

    def log_step(self, step, epoch, losses: dict):
        self.loss_rows.append({"step": step, "epoch": epoch, **losses})

    def log_factors(self, step, state: LceState):
        for m in range(state.B.size):
            self.factor_rows.append({
                "step": step, "modality": m, "present_count": int(state.present_count[m]),
                "U": float(state.U[m]), "phi": float(state.phi[m]),
                "delta": float(state.delta[m]), "B": float(state.B[m]),
            })


# -- pretraining ---------------------------------------------------------------------


def _fit_unimodal(x_m, y, model_cfg: ModelConfig, config: TrainConfig, seed):
    rng = np.random.default_rng([int(seed), 211])
    raw = init_encoder(rng, model_cfg.input_dim, model_cfg.hidden_dim, model_cfg.feature_dim, "enc")
    raw["dec.W"] = rng.normal(0.0, np.sqrt(2.0 / model_cfg.feature_dim),
                              size=(model_cfg.feature_dim, model_cfg.class_count))
    raw["dec.b"] = np.zeros(model_cfg.class_count)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    opt = Adam(config.pretrain_lr)
    shuffle = np.random.default_rng([int(seed), SHUFFLE_STREAM])
    for _ in range(config.pretrain_epochs):
        for idx in batches(len(y), config.batch_size, shuffle):
            with Tape() as tape:
                h = encoder_forward(params, "enc", x_m[idx])
                loss = tc.softmax_cross_entropy(tc.dense_forward(h, params["dec.W"], params["dec.b"]), y[idx])
            tape.backward(loss)
            opt.step(params)
    return {k: v.data for k, v in params.items()}


def pretrain_unimodal(dataset: Dataset, m: int, model_cfg: ModelConfig, config: TrainConfig,
                      holdout: Dataset | None = None) -> FrozenUnimodal:
    """Train an encoder + linear decoder on the samples where modality ``m`` is present."""
    rows = np.flatnonzero(dataset.E[:, m])
    if rows.size == 0:
        raise ConfigurationError(f"modality {m} has no present samples to pretrain on", field="missing_rates")
    params = _fit_unimodal(dataset.x[rows, m, :], dataset.y[rows], model_cfg, config, seed=config.seed * 1000 + m)
    frozen = FrozenUnimodal(m, params)
    if holdout is not None:
        keep = np.flatnonzero(holdout.E[:, m])
        pred = frozen.logits(holdout.x[keep, m, :]).argmax(axis=1)
        frozen.accuracy = float(np.mean(pred == holdout.y[keep]))
    return frozen


def pretrain_all(dataset: Dataset, model_cfg: ModelConfig, config: TrainConfig,
                 holdout: Dataset | None = None) -> list[FrozenUnimodal]:
    return [pretrain_unimodal(dataset, m, model_cfg, config, holdout) for m in range(dataset.modality_count)]


# -- evaluation ----------------------------------------------------------------------


def subset_label(mask: int) -> str:
    return "{" + ",".join(str(m + 1) for m in members(mask)) + "}"


def evaluate_all_subsets(model: MultiModalModel, dataset: Dataset) -> tuple[list[dict], float]:
    """Accuracy for every non-empty modality subset, plus their unweighted mean.

    Each subset is scored on the samples that have all of its modalities; the
    other modalities are treated as missing and go through the same
    completion path as in training.
    """
    M = dataset.modality_count
    masks = dataset.masks()
    rows = []
    for s in enumerate_subsets((1 << M) - 1):
        idx = np.flatnonzero((masks & s) == s)
        if idx.size == 0:
            continue
        E = np.broadcast_to(((s >> np.arange(M)) & 1).astype(np.int8), (idx.size, M))
        with tc.no_grad():
            logits = model.task_logits(dataset.x[idx] * E[:, :, None], E).data
        acc = float(np.mean(logits.argmax(axis=1) == dataset.y[idx]))
        rows.append({"subset": subset_label(s), "mask": s, "samples": int(idx.size), "accuracy": acc})
    average = float(np.mean([r["accuracy"] for r in rows])) if rows else float("nan")
    return rows, average


def fused_features(model: MultiModalModel, dataset: Dataset) -> np.ndarray:
    with tc.no_grad():
        return model.task_fused(dataset.x, dataset.E).data


def probe_capability(encoder: dict[str, np.ndarray], m: int, train: Dataset, test: Dataset,
                     config: TrainConfig, class_count: int | None = None, seed: int = 0) -> float:
    """Held-out accuracy of a fresh linear decoder on a fixed encoder's features.

    ``encoder`` holds ``W1, b1, W2, b2`` arrays and is never modified.
    """
    C = class_count or train.class_count
    fixed = {f"enc.{k}": Tensor(v) for k, v in encoder.items()}

    def feats(ds):
        keep = np.flatnonzero(ds.E[:, m])
        with tc.no_grad():
            return encoder_forward(fixed, "enc", ds.x[keep, m, :]).data, ds.y[keep]

    h_tr, y_tr = feats(train)
    h_te, y_te = feats(test)
    mu, sd = h_tr.mean(axis=0), h_tr.std(axis=0) + 1e-8
    h_tr, h_te = (h_tr - mu) / sd, (h_te - mu) / sd
    rng = np.random.default_rng([int(seed), 307, m])
    W = Tensor(rng.normal(0.0, 0.01, size=(h_tr.shape[1], C)), requires_grad=True)
    b = Tensor(np.zeros(C), requires_grad=True)
    params = {"W": W, "b": b}
    opt = Adam(config.probe_lr)
    for _ in range(config.probe_steps):
        with Tape() as tape:
            loss = tc.softmax_cross_entropy(tc.dense_forward(h_tr, params["W"], params["b"]), y_tr)
        tape.backward(loss)
        opt.step(params)
    pred = (h_te @ params["W"].data + params["b"].data).argmax(axis=1)
    return float(np.mean(pred == y_te))


def encoder_params(model: MultiModalModel, m: int) -> dict[str, np.ndarray]:
    return {k.split(".", 1)[1]: v.data.copy() for k, v in model.group(f"enc{m}").items()}


# -- joint training ----------------------------------------------------------------------


def train_mce(train: Dataset, frozen: list[FrozenUnimodal], model_cfg: ModelConfig, config: TrainConfig,
              test: Dataset | None = None, run_dir=None) -> tuple[MultiModalModel, RunLog]:
    """Joint training with the LCE factors and RCE losses.

    A is computed once from the training presence matrix. Each batch: frozen
    correct counts U, batch Shapley phi and B are computed without a tape, then
    the loss is assembled under a fresh tape and one optimiser step is taken.
    ``use_A`` / ``use_B`` switch a factor to all-ones when off.
    """
    config.validate()
    model = MultiModalModel(model_cfg, seed=config.seed)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    runlog = RunLog()
    runlog.manifest = {"train_config": _jsonable(asdict(config)), "model_config": asdict(model_cfg),
                       "dataset": train.fingerprint(), "rng": "numpy PCG64"}
    M = train.modality_count
    A = compute_factor_A(train.E) if config.use_A else np.ones(M)
    runlog.A = A
    frozen_table = frozen_accuracy_table(frozen, train.x, train.E, train.y, soft=config.soft_accuracy)
    frozen_hashes = [f.param_hash() for f in frozen]
    shuffle = np.random.default_rng([int(config.seed), SHUFFLE_STREAM])
    mc_rng = np.random.default_rng([int(config.seed), 13])
    cap_rng = np.random.default_rng([int(config.seed), 17])
    cap = config.subset_cap if M > 4 else None
    lam_single, lam_sub, lam_aux = config.lambdas
    step = 0
    for epoch in range(1, config.epochs + 1):
        for idx in batches(train.n, config.batch_size, shuffle):
            xb, Eb, yb = train.x[idx], train.E[idx], train.y[idx]
            state = compute_lce_state(model, xb, Eb, yb, frozen_table[idx], A, soft=config.soft_accuracy,
                                      exact_threshold=config.exact_threshold, K=config.mc_K, rng=mc_rng)
            B = state.B if config.use_B else np.ones(M)
            plan = build_subset_plan(Eb, cap=cap, rng=cap_rng) if (lam_sub or lam_aux) else None
            good = model.state()
            try:
                with Tape() as tape:
                    h = model.encode(xb, Eb)
                    task = loss_task(model, h, yb, Eb)
                    single = loss_single(model, h, yb, Eb, A, B) if lam_single else Tensor(0.0)
                    sub = loss_sub(model, h, yb, plan, config.epsilon) if lam_sub else Tensor(0.0)
                    aux = (loss_aux(model, h, plan, A, B, config.epsilon, config.recon_norm)
                           if lam_aux else Tensor(0.0))
                    losses = total_loss(task, single, sub, aux, config.lambdas, config.epsilon)
            except (TrainingDivergenceError, FloatingPointError) as exc:
                _abort(model, good, runlog, step, epoch, run_dir, exc)
                raise
            for p in model.params.values():
                p.grad = None
            tape.backward(losses.total)
            opt.step(model.params)
            step += 1
            runlog.log_step(step, epoch, losses.values())
            runlog.log_factors(step, state)
        if test is not None and config.eval_every and epoch % config.eval_every == 0:
            rows, avg = evaluate_all_subsets(model, test)
            for r in rows:
                runlog.eval_rows.append({"epoch": epoch, "subset": r["subset"], "samples": r["samples"],
                                         "accuracy": r["accuracy"]})
            runlog.eval_rows.append({"epoch": epoch, "subset": "average", "samples": test.n, "accuracy": avg})
        if test is not None and config.probe_every and epoch % config.probe_every == 0:
            for m in range(M):
                cap_acc = probe_capability(encoder_params(model, m), m, train, test, config, seed=config.seed)
                runlog.probe_rows.append({"epoch": epoch, "modality": m, "capability": cap_acc})
    if [f.param_hash() for f in frozen] != frozen_hashes:
        raise RuntimeError("frozen unimodal parameters changed during training")
    if run_dir is not None:
        save_checkpoint(model, Path(run_dir) / "model", step=step)
    return model, runlog


def _abort(model, good_state, runlog, step, epoch, run_dir, exc):
    component = getattr(exc, "component", "forward")
    runlog.loss_rows.append({"step": step + 1, "epoch": epoch, "task": float("nan"), "single": float("nan"),
                             "sub": float("nan"), "aux": float("nan"), "total": float("nan")})
    log.error("aborting at step %d: non-finite %s", step + 1, component)
    if run_dir is not None:
        model.load_state(good_state)
        save_checkpoint(model, Path(run_dir) / "last_good", step=step,
                        extra={"aborted": True, "reason": str(exc)})


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
