"""Acceptance criteria, one test each, at the stated tolerances.

Every test records a one-line verdict; the terminal summary prints them all
(see ``pytest_terminal_summary`` in conftest.py).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import param_fn, tiny_config
from mce import tensor_core as tc
from mce.analysis import repr_quality
from mce.cli import main
from mce.coalition import CoalitionGame, brute_force_shapley, exact_shapley, mc_shapley
from mce.config import ExperimentConfig
from mce.csvio import file_hash
from mce.gradcheck import check_gradients
from mce.lce import compute_factor_A, compute_factor_B, factor_A_raw
from mce.model import MultiModalModel
from mce.rce import build_subset_plan, loss_aux, loss_single, loss_sub, loss_task
from mce.synth_data import generate, generate_test
from mce.tensor_core import Tape, Tensor
from mce.trainer import (baseline_config, encoder_params, evaluate_all_subsets, fused_features, pretrain_all,
                         probe_capability, train_mce)

RESULTS: list[str] = []


def verdict(number: int, name: str, ok: bool, detail: str):
    RESULTS.append(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


# -- 1 ---------------------------------------------------------------------------


def test_criterion_01_shapley_axioms():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"efficiency": 0.0, "dummy": 0.0, "symmetry": 0.0, "additivity": 0.0, "brute_force": 0.0}
    for g in range(100):
        M = 2 + g % 4
        t1, t2 = rng.normal(size=1 << M), rng.normal(size=1 << M)
        phi1 = exact_shapley(CoalitionGame.from_table(t1)).phi
        phi2 = exact_shapley(CoalitionGame.from_table(t2)).phi
        worst["efficiency"] = max(worst["efficiency"], abs(phi1.sum() - (t1[-1] - t1[0])))
        worst["additivity"] = max(worst["additivity"],
                                  np.max(np.abs(exact_shapley(CoalitionGame.from_table(t1 + t2)).phi - phi1 - phi2)))
        worst["brute_force"] = max(worst["brute_force"],
                                   np.max(np.abs(phi1 - brute_force_shapley(CoalitionGame.from_table(t1)))))
        # Symmetrise players 0 and 1; make the last player a dummy.
        swap = [s ^ 0b11 if (s & 1) != (s >> 1 & 1) else s for s in range(1 << M)]
        sym = exact_shapley(CoalitionGame.from_table((t1 + t1[swap]) / 2)).phi
        worst["symmetry"] = max(worst["symmetry"], abs(sym[0] - sym[1]))
        dummy = exact_shapley(CoalitionGame.from_table(t1[[s & ~(1 << (M - 1)) for s in range(1 << M)]])).phi
        worst["dummy"] = max(worst["dummy"], abs(dummy[M - 1]))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-10 and elapsed < 10
    verdict(1, "Shapley axioms", ok, f"max deviation {max(worst.values()):.1e} (< 1e-10), {elapsed:.2f}s (< 10s)")


# -- 2 ---------------------------------------------------------------------------


def test_criterion_02_batch_factor_arithmetic():
    cases = [
        ((91, 26, 12), (23.6667, 11.6667, 4.0), (101, 65, 20), (0.6667, 0.2205, 0.4000)),
        ((91, 29, 8), (59.6667, 34.6667, 10.6667), (105, 79, 25), (0.2984, 0.0, 0.0)),
        ((0.8216, 0.8051, 0.8018, 0.8283), (0.3053, 0.2146, 0.0, 0.2013), (1, 1, 0, 1),
         (0.5163, 0.5905, 0.0, 0.6270)),
    ]
    err = max(np.max(np.abs(compute_factor_B(phi, U, n)[1] - np.array(want))) for U, phi, n, want in cases)
    verdict(2, "factor B table arithmetic", err < 1e-3, f"max |B - reported| {err:.2e} (< 1e-3)")


# -- 3 ---------------------------------------------------------------------------


def test_criterion_03_factor_A():
    E = np.zeros((10, 4), dtype=int)
    for m, c in enumerate((10, 8, 5, 2)):
        E[:c, m] = 1
    raw = factor_A_raw(E)
    mean_err = abs(compute_factor_A(E).mean() - 1.0)
    ok = raw.tolist() == [1.0, 1.25, 2.0, 5.0] and mean_err < 1e-12
    verdict(3, "factor A", ok, f"raw A {raw.tolist()}, |mean(A) - 1| {mean_err:.1e}")


# -- 4 ---------------------------------------------------------------------------


def test_criterion_04_monte_carlo_convergence():
    errs, calls = [], []
    for seed in range(10):
        rng = np.random.default_rng(500 + seed)
        table = rng.random(16)
        table[0] = 0.0
        exact = exact_shapley(CoalitionGame.from_table(table)).phi
        game = CoalitionGame(4, table.__getitem__, empty_value=0.0)
        res = mc_shapley(game, K=2000, seed=seed)
        errs.append(np.max(np.abs(res.phi - exact)))
        calls.append(res.oracle_calls)
    ok = np.mean(errs) < 0.05 and max(calls) <= 15
    verdict(4, "Monte-Carlo convergence", ok,
            f"mean max-abs error {np.mean(errs):.4f} (< 0.05), max oracle calls {max(calls)} (<= 15)")


# -- 5 ---------------------------------------------------------------------------


def test_criterion_05_gradient_integrity():
    start = time.perf_counter()
    model = MultiModalModel(tiny_config(), seed=11)
    rng = np.random.default_rng(12)
    E = np.array([[1, 1, 1], [0, 1, 1]])
    x = rng.normal(size=(2, 3, 3)) * E[:, :, None]
    y = np.array([1, 2])
    A, B = compute_factor_A(E), np.array([0.5, 0.25, 0.75])
    plan = build_subset_plan(E)
    target = model.encode(x, E).data
    terms = {
        "task": lambda m, h: loss_task(m, h, y, E),
        "single": lambda m, h: loss_single(m, h, y, E, A, B),
        "sub": lambda m, h: loss_sub(m, h, y, plan),
        "aux": lambda m, h: loss_aux(m, h, plan, A, B, target=target),
    }
    arrays = {k: v.data.copy() for k, v in model.params.items()}
    worst = {}
    for name, fn in terms.items():
        errs = check_gradients(param_fn(model, lambda m, fn=fn: fn(m, m.encode(x, E))), arrays)
        worst[name] = max(errs.values())
        model.params.update({k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
    rec = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("rec.") and k != "rec.pos"}
    probe = rng.normal(size=(2, 3, 4))
    worst["attention"] = max(check_gradients(
        lambda t: tc.mse(tc.attention_block(t["x"], 2, {k: v for k, v in t.items() if k != "x"}), probe),
        rec | {"x": target}).values())
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(5, "gradient integrity", ok, f"{detail} (< 1e-4), {elapsed:.1f}s (< 30s)")


# -- 6 ---------------------------------------------------------------------------


def test_criterion_06_subset_machinery():
    rng = np.random.default_rng(6)
    mismatches = 0
    for i in range(200):
        M = 1 + i % 4
        N = int(rng.integers(1, 10))
        E = (rng.random((N, M)) < 0.6).astype(int)
        E[E.sum(axis=1) == 0, 0] = 1
        rows = [{m for m in range(M) if E[n, m]} for n in range(N)]
        expected = {}
        for s in range(1, 1 << M):
            feas = [n for n in range(N) if {m for m in range(M) if s >> m & 1} <= rows[n]]
            if feas:
                expected[s] = feas
        plan = build_subset_plan(E)
        if plan.s_batch != sorted(expected) or {s: v.tolist() for s, v in plan.n_s.items()} != expected:
            mismatches += 1
    seven = len(build_subset_plan(np.ones((4, 3))).s_batch)
    verdict(6, "subset machinery", mismatches == 0 and seven == 7,
            f"{mismatches}/200 plans differ from brute force, full M=3 batch has {seven} subsets")


# -- 7 ---------------------------------------------------------------------------


def test_criterion_07_masking_and_reduction():
    rng = np.random.default_rng(7)
    min_B = min(compute_factor_B(rng.normal(size=4) * 50, rng.random(4) * 50, rng.integers(0, 20, size=4))[1].min()
                for _ in range(1000))
    model = MultiModalModel(tiny_config(), seed=1)
    E = np.array([[1, 1, 1], [1, 0, 1], [0, 1, 0]])
    x = rng.normal(size=(3, 3, 3)) * E[:, :, None]
    y = np.array([0, 1, 2])
    with Tape() as tape:
        h = model.encode(x, E)
        masked = tc.add(loss_single(model, h, y, E, np.ones(3), np.zeros(3)),
                        loss_aux(model, h, build_subset_plan(E), np.ones(3), np.zeros(3)))
    tape.backward(masked)
    grads_zero = all(p.grad is None or not p.grad.any() for p in model.params.values())

    cfg = ExperimentConfig().with_seed(3)
    synth = replace(cfg.synth, samples=256)
    train = generate(synth)
    tcfg = baseline_config(replace(cfg.train, epochs=2, optimizer="sgd", learning_rate=0.05, pretrain_epochs=2))
    mcfg = cfg.model_config()
    frozen = pretrain_all(train, mcfg, tcfg)
    _, log = train_mce(train, frozen, mcfg, tcfg)

    plain = MultiModalModel(mcfg, seed=tcfg.seed)
    shuffle = np.random.default_rng([tcfg.seed, 7])
    reference = []
    for _ in range(tcfg.epochs):
        order = shuffle.permutation(train.n)
        for start in range(0, train.n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            with Tape() as tape:
                loss = tc.softmax_cross_entropy(plain.task_logits(train.x[idx], train.E[idx]), train.y[idx])
            tape.backward(loss)
            for k, p in plain.params.items():
                if p.grad is not None:
                    plain.params[k] = Tensor(p.data - tcfg.learning_rate * p.grad, requires_grad=True)
            reference.append(loss.item())
    same = [r["total"] for r in log.loss_rows] == reference
    ok = min_B >= 0 and masked.item() == 0.0 and grads_zero and same
    verdict(7, "masking and reduction", ok,
            f"min B {min_B:.3g}, masked loss {masked.item()}, zero grads {grads_zero}, "
            f"lambda=0 run matches plain loop on {len(reference)} steps: {same}")


# -- 8 and 9 -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_experiment():
    """Full MCE vs task-only baseline on the default synthetic setup, five seeds."""
    start = time.perf_counter()
    out = []
    for seed in range(5):
        cfg = ExperimentConfig().with_seed(seed)
        train, test = generate(cfg.synth), generate_test(cfg.synth, cfg.run.test_samples)
        mcfg = cfg.model_config()
        frozen = pretrain_all(train, mcfg, cfg.train, holdout=test)
        arms = {}
        for name, tcfg in (("mce", cfg.train), ("base", baseline_config(cfg.train))):
            model, _ = train_mce(train, frozen, mcfg, tcfg)
            _, avg = evaluate_all_subsets(model, test)
            probe = probe_capability(encoder_params(model, 2), 2, train, test, tcfg, seed=tcfg.seed)
            ratio = repr_quality(fused_features(model, test), test.y).ratio
            arms[name] = {"avg": avg, "probe3": probe, "ratio": ratio}
        out.append(arms)
    return out, time.perf_counter() - start


def test_criterion_08_desk_experiment(desk_experiment):
    runs, elapsed = desk_experiment
    mce = np.median([r["mce"]["avg"] for r in runs])
    base = np.median([r["base"]["avg"] for r in runs])
    wins = sum(r["mce"]["probe3"] > r["base"]["probe3"] for r in runs)
    ok = mce > base and wins >= 4 and elapsed < 600
    verdict(8, "desk experiment", ok,
            f"median all-subset accuracy MCE {mce:.4f} vs baseline {base:.4f}, modality-3 probe better in "
            f"{wins}/5 seeds (>= 4), {elapsed:.0f}s (< 600s)")


def test_criterion_09_representation_direction(desk_experiment):
    runs, _ = desk_experiment
    mce = np.median([r["mce"]["ratio"] for r in runs])
    base = np.median([r["base"]["ratio"] for r in runs])
    verdict(9, "representation direction", mce < base,
            f"median intra/inter ratio MCE {mce:.3f} vs baseline {base:.3f}")


# -- 10 ------------------------------------------------------------------------------


TINY = "[synth_data]\nsamples = 160\ntest_samples = 80\n[trainer]\nepochs = 2\npretrain_epochs = 3\nprobe_steps = 30\n"


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    game = tmp_path / "game.txt"
    game.write_text("players = 2\n0 0\n1 0.25\n2 0.5\n3 1\n")
    base = ["--config", str(cfg), "--seed", "5"]
    commands = [["gen-data"], ["pretrain"], ["train"], ["eval"], ["probe"], ["report"], ["ablate", "--rows", "ad"],
                ["shapley", "--game", str(game), "--method", "mc", "--K", "9"]]
    digests = []
    for rep in ("a", "b"):
        run = tmp_path / rep
        for cmd in commands:
            assert main(cmd + base + ["--out", str(run)]) == 0, cmd
        digests.append({p.name: file_hash(p) for p in sorted(run.glob("*.csv"))})
    ok = digests[0] == digests[1] and len(digests[0]) >= 12
    verdict(10, "determinism", ok, f"{len(digests[0])} CSVs across {len(commands)} subcommands byte-identical: "
                                   f"{digests[0] == digests[1]}")
