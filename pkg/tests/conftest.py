import numpy as np
import pytest

from mce.model import ModelConfig, MultiModalModel


def tiny_config(**kw):
    base = dict(modality_count=3, input_dim=3, feature_dim=4, hidden_dim=5, class_count=3, heads=2, ffn_dim=4,
                pos_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    """Two samples, M=3, D=4: one fully present, one missing modality 1."""
    cfg = tiny_config()
    model = MultiModalModel(cfg, seed=3)
    rng = np.random.default_rng(5)
    E = np.array([[1, 1, 1], [1, 0, 1]], dtype=np.int8)
    x = rng.normal(size=(2, 3, cfg.input_dim)) * E[:, :, None]
    y = np.array([2, 0])
    return model, x, E, y


def param_fn(model, loss_of_model):
    """Adapter for gradcheck: swap the given arrays in as model parameters, then evaluate."""
    def fn(tensors):
        model.params.update(tensors)
        return loss_of_model(model)

    return fn


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS):
        terminalreporter.write_line(line)
