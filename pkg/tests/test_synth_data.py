import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mce.errors import ConfigurationError
from mce.synth_data import (SynthConfig, apply_missing, calibrated_keep, export_csv, generate, generate_test,
                            load_dataset, sample_complete, save_dataset)


def lstsq_probe(x_train, y_train, x_test, y_test, C):
    """Least-squares linear classifier on one-hot targets with a bias column."""
    def aug(x):
        return np.hstack([x, np.ones((x.shape[0], 1))])

    W, *_ = np.linalg.lstsq(aug(x_train), np.eye(C)[y_train], rcond=None)
    return float(np.mean(np.argmax(aug(x_test) @ W, axis=1) == y_test))


def test_noiseless_modalities_are_linearly_separable():
    cfg = SynthConfig(snr=(1e12, 1e12, 1e12), samples=400)
    x, y = sample_complete(cfg, cfg.samples)
    for m in range(3):
        assert lstsq_probe(x[:, m], y, x[:, m], y, cfg.class_count) == 1.0


def test_same_seed_is_bit_identical():
    cfg = SynthConfig(samples=300, seed=17)
    a, b = generate(cfg), generate(cfg)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.E.tobytes() == b.E.tobytes()
    assert a.y.tobytes() == b.y.tobytes()
    assert generate(SynthConfig(samples=300, seed=18)).fingerprint() != a.fingerprint()


def test_probe_accuracy_follows_snr_order():
    cfg = SynthConfig(samples=3000, seed=1)
    x, y = sample_complete(cfg, cfg.samples)
    test = generate_test(cfg, 2000)
    acc = [lstsq_probe(x[:, m], y, test.x[:, m], test.y, cfg.class_count) for m in range(3)]
    assert acc[0] > acc[1] > acc[2]


def test_labels_cover_classes_uniformly():
    cfg = SynthConfig(samples=8000, seed=2)
    _, y = sample_complete(cfg, cfg.samples)
    freq = np.bincount(y, minlength=4) / y.size
    assert np.all(np.abs(freq - 0.25) < 0.02)


def test_zero_rates_give_all_ones():
    assert np.array_equal(apply_missing(50, (0.0, 0.0, 0.0), seed=3), np.ones((50, 3)))


def test_marginal_presence_matches_rates():
    E = apply_missing(10000, (0.2, 0.5, 0.8), seed=0)
    assert np.all(E.sum(axis=1) >= 1)
    assert np.all(np.abs(E.mean(axis=0) - [0.8, 0.5, 0.2]) < 0.02)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 0.9), min_size=2, max_size=5))
def test_calibrated_keep_conditional_marginals(rates):
    k = 1 - np.array(rates)
    q = calibrated_keep(rates)
    if k.sum() <= 1:
        assert np.array_equal(q, k)
        return
    # Enumerate all rows: P(E_m = 1 | row non-empty) must equal 1 - r_m.
    M = len(rates)
    marg, nonempty = np.zeros(M), 0.0
    for mask in range(1, 1 << M):
        bits = np.array([mask >> m & 1 for m in range(M)])
        p = np.prod(np.where(bits, q, 1 - q))
        nonempty += p
        marg += p * bits
    assert np.allclose(marg / nonempty, k, atol=1e-9)


def test_small_matrix_with_illustration_counts_is_valid():
    # N=10 with presence counts (10, 8, 5, 2) across four modalities.
    E = np.zeros((10, 4), dtype=np.int8)
    E[:, 0] = 1
    E[:8, 1] = 1
    E[:5, 2] = 1
    E[:2, 3] = 1
    assert E.sum(axis=0).tolist() == [10, 8, 5, 2]
    assert np.all(E.sum(axis=1) >= 1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 0.95), min_size=2, max_size=5), st.integers(1, 200), st.integers(0, 2 ** 31))
def test_no_row_is_ever_empty(rates, n, seed):
    E = apply_missing(n, rates, seed)
    assert E.shape == (n, len(rates))
    assert np.all(E.sum(axis=1) >= 1)
    assert np.array_equal(E, apply_missing(n, rates, seed))


def test_absent_inputs_are_zeroed():
    ds = generate(SynthConfig(samples=200))
    assert not ds.x[ds.E == 0].any()
    assert ds.x[ds.E == 1].any(axis=-1).all()


def test_test_split_is_fully_present_and_disjoint_stream():
    cfg = SynthConfig(samples=100)
    test = generate_test(cfg, 100)
    assert test.E.all()
    assert not np.array_equal(test.x, sample_complete(cfg, 100)[0])


@pytest.mark.parametrize("kwargs,field", [
    ({"modality_count": 1, "snr": (1.0,), "missing_rates": (0.0,)}, "modality_count"),
    ({"class_count": 1}, "class_count"),
    ({"samples": 0}, "samples"),
    ({"snr": (1.0, 0.0, 1.0)}, "snr"),
    ({"snr": (1.0, 1.0)}, "snr"),
    ({"missing_rates": (0.2, 1.0, 0.1)}, "missing_rates"),
    ({"missing_rates": (0.2, -0.1, 0.1)}, "missing_rates"),
])
def test_invalid_config(kwargs, field):
    with pytest.raises(ConfigurationError) as info:
        generate(SynthConfig(**kwargs))
    assert info.value.field == field


def test_save_load_round_trip(tmp_path):
    ds = generate(SynthConfig(samples=64, seed=5))
    save_dataset(ds, tmp_path / "train")
    back = load_dataset(tmp_path / "train")
    assert back.fingerprint() == ds.fingerprint()
    assert back.class_count == ds.class_count
    assert back.meta["seed"] == 5


def test_csv_export_round_trip(tmp_path):
    ds = generate(SynthConfig(samples=20, feature_dim=3))
    export_csv(ds, tmp_path / "d.csv")
    with open(tmp_path / "d.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["label", "present_0", "present_1", "present_2"]
    assert len(rows) == 21
    x = np.array([[float(v) for v in r[4:]] for r in rows[1:]])
    assert np.array_equal(x, ds.x.reshape(20, -1))
    assert [int(r[0]) for r in rows[1:]] == ds.y.tolist()
