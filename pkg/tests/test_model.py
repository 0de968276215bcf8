import numpy as np
import pytest

from conftest import param_fn, tiny_config
from mce import tensor_core as tc
from mce.errors import ConfigurationError, ContractError
from mce.gradcheck import check_gradients
from mce.lce import compute_factor_A
from mce.model import (FrozenUnimodal, MultiModalModel, load_checkpoint, load_frozen, save_checkpoint, save_frozen,
                       unimodal_predict)
from mce.rce import build_subset_plan, loss_aux, loss_single, loss_sub, loss_task, total_loss
from mce.tensor_core import Tape


def test_encode_shape_and_zeroed_absent_slots(tiny):
    model, x, E, _ = tiny
    h = model.encode(x, E)
    assert h.shape == (2, 3, 4)
    assert not h.data[1, 1].any()
    assert h.data[0].any(axis=-1).all()


def test_encode_rejects_mismatched_presence(tiny):
    model, x, _, _ = tiny
    with pytest.raises(ContractError):
        model.encode(x, np.ones((2, 2)))


def test_zero_encoder_gives_zero_features(tiny):
    model, x, E, _ = tiny
    for k in model.group("enc0"):
        model.params[k] = tc.Tensor(np.zeros(model.params[k].shape))
    assert not model.encode(x, E).data[:, 0].any()


def test_reconstruct_preserves_shape(tiny):
    model, x, E, _ = tiny
    h = model.encode(x, E)
    assert model.reconstruct(h, E).shape == h.shape


def test_dropped_slots_depend_on_positional_encoding(tiny):
    model, x, E, _ = tiny
    h = model.encode(x, E)
    keep = 0b001
    out = model.reconstruct(h, keep).data
    assert np.all(np.isfinite(out))
    assert out[:, 1:].any()
    model.params["rec.pos"] = tc.Tensor(model.params["rec.pos"].data * 2.0)
    assert not np.allclose(model.reconstruct(h, keep).data[:, 1:], out[:, 1:])


def test_dropped_slot_loss_reaches_present_encoder(tiny):
    model, x, E, _ = tiny
    with Tape() as tape:
        h = model.encode(x, E)
        out = model.reconstruct(h, 0b001)
        loss = tc.sum(tc.square(tc.take(out, [2], axis=1)))
    tape.backward(loss)
    assert np.max(np.abs(model.params["enc0.W1"].grad)) > 0


def test_full_subset_matches_unmasked(tiny):
    model, x, E, _ = tiny
    h = model.encode(np.ones_like(x), np.ones_like(E))
    assert np.array_equal(model.fuse_predict(h, 0b111).data, model.fuse_predict(h).data)


def test_subsets_are_distinguishable(tiny):
    model, x, _, _ = tiny
    h = model.encode(x, np.ones((2, 3)))
    a, b = model.fuse_predict(h, 0b001).data, model.fuse_predict(h, 0b110).data
    assert a.shape == (2, 3)
    assert not np.allclose(a, b)


def test_empty_subset_is_rejected(tiny):
    model, x, E, _ = tiny
    with pytest.raises(ContractError):
        model.fuse_predict(model.encode(x, E), 0)


def test_forward_is_deterministic(tiny):
    model, x, E, _ = tiny
    a = model.task_logits(x, E).data
    b = MultiModalModel(model.config, seed=3).task_logits(x, E).data
    assert a.tobytes() == b.tobytes()


def test_complete_keeps_observed_slots(tiny):
    model, x, E, _ = tiny
    h = model.encode(x, E)
    done = model.complete(h, E).data
    assert np.array_equal(done[E == 1], h.data[E == 1])
    assert done[1, 1].any()


def _frozen(seed=0):
    rng = np.random.default_rng(seed)
    params = {"enc.W1": rng.normal(size=(3, 5)), "enc.b1": np.zeros(5), "enc.W2": rng.normal(size=(5, 4)),
              "enc.b2": np.zeros(4), "dec.W": rng.normal(size=(4, 3)), "dec.b": np.zeros(3)}
    return FrozenUnimodal(1, params, accuracy=0.5)


def test_unimodal_predict_contract(tiny):
    _, x, E, _ = tiny
    frozen = _frozen()
    with pytest.raises(ContractError):
        unimodal_predict(frozen, x, E)
    assert unimodal_predict(frozen, x[:1], E[:1]).shape == (1, 3)


def test_frozen_params_are_read_only():
    frozen = _frozen()
    with pytest.raises(ValueError):
        frozen.params["dec.W"][0, 0] = 1.0


def test_checkpoint_round_trip(tmp_path, tiny):
    model, x, E, _ = tiny
    save_checkpoint(model, tmp_path / "ckpt", step=7)
    back, manifest = load_checkpoint(tmp_path / "ckpt")
    assert manifest["step"] == 7
    assert back.param_hash() == model.param_hash()
    assert np.array_equal(back.task_logits(x, E).data, model.task_logits(x, E).data)


def test_frozen_round_trip(tmp_path):
    frozen = _frozen()
    save_frozen([frozen], tmp_path / "frozen")
    (back,) = load_frozen(tmp_path / "frozen")
    assert back.param_hash() == frozen.param_hash()
    assert back.modality == 1 and back.accuracy == 0.5


def full_objective(model, x, E, y, A, B):
    plan = build_subset_plan(E)
    # Completion targets are detached, so finite differences must hold them fixed too.
    target = model.encode(x, E).data

    def loss(model):
        h = model.encode(x, E)
        return total_loss(loss_task(model, h, y, E), loss_single(model, h, y, E, A, B),
                          loss_sub(model, h, y, plan), loss_aux(model, h, plan, A, B, target=target)).total

    return loss


def test_end_to_end_gradients_every_group(tiny):
    model, x, E, y = tiny
    A = compute_factor_A(E)
    B = np.array([0.3, 0.5, 0.2])
    arrays = {k: v.data.copy() for k, v in model.params.items()}
    errs = check_gradients(param_fn(model, full_objective(model, x, E, y, A, B)), arrays)
    groups = {}
    for k, e in errs.items():
        groups[k.split(".")[0]] = max(groups.get(k.split(".")[0], 0.0), e)
    assert set(groups) == {"enc0", "enc1", "enc2", "rec", "fuse", "dec", "uni0", "uni1", "uni2"}
    assert max(groups.values()) < 1e-4, groups


def test_model_config_heads_must_divide():
    with pytest.raises(ConfigurationError):
        MultiModalModel(tiny_config(heads=3), seed=0)
