import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svreid.backbone import BackboneConfig, build_model
from svreid.checkpoint import import_checkpoint
from svreid.data import generate_synthetic, sample_pair_batch
from svreid.errors import DivergenceError
from svreid.head import VerificationHead
from svreid.imaging import AugmentConfig
from svreid.tensor import Tensor
from svreid.train import (
    CHECKPOINT_NAME,
    LOG_HEADER,
    LOG_NAME,
    OptimizerState,
    TrainConfig,
    derive_seed,
    evaluate_pair_accuracy,
    rmsprop_step,
    substream,
    train,
    train_step,
)

SMALL = BackboneConfig(height=32, width=16)


def test_rmsprop_hand_example():
    p = {"w": Tensor(np.zeros(1))}
    state = OptimizerState()
    rmsprop_step(p, {"w": np.ones(1)}, state, lr=1e-4, rho=0.9, eps=1e-7)
    np.testing.assert_allclose(state.v["w"], [0.1], rtol=1e-15)
    np.testing.assert_allclose(-p["w"].data, [1e-4 / (np.sqrt(0.1) + 1e-7)], rtol=1e-12)
    assert abs(-p["w"].data[0] - 3.16228e-4) < 1e-9


def test_rmsprop_zero_gradient_is_noop():
    p = {"w": Tensor(np.array([1.5, -2.0]))}
    state = OptimizerState()
    rmsprop_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.5, -2.0])
    np.testing.assert_array_equal(state.v["w"], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3).filter(lambda g: g != 0), min_size=1, max_size=8))
def test_rmsprop_moves_against_gradient(g):
    g = np.array(g)
    p = {"w": Tensor(np.zeros_like(g))}
    rmsprop_step(p, {"w": g}, OptimizerState(), lr=1e-3)
    assert np.all(np.sign(p["w"].data) * np.sign(g) <= 0)
    normal = np.abs(g) > 1e-150  # below this lr * g / eps underflows to an exact zero step
    assert np.all(np.sign(p["w"].data[normal]) == -np.sign(g[normal]))


def test_rmsprop_names_non_finite_parameter():
    p = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(2))}
    with pytest.raises(DivergenceError, match="'b'"):
        rmsprop_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, OptimizerState())
    np.testing.assert_array_equal(p["a"].data, 0)


def test_substreams_are_independent_and_reproducible():
    assert substream(3, "init").random() == substream(3, "init").random()
    assert substream(3, "init").random() != substream(3, "sampler").random()
    assert derive_seed(3, "gallery") == derive_seed(3, "gallery")
    assert derive_seed(3, "gallery") != derive_seed(4, "gallery")


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(4, 2, 1, 32, 16)


def test_zero_steps_leaves_params(tiny_data, tmp_path):
    model = build_model(SMALL, seed=0)
    before = {k: t.data.copy() for k, t in model.items()}
    ckpt, log = train(tiny_data, model, VerificationHead.zeros(64), TrainConfig(steps=0), out_dir=tmp_path)
    assert log.rows == []
    for k, t in model.items():
        assert t.data.tobytes() == before[k].tobytes()
    assert (tmp_path / LOG_NAME).read_text() == LOG_HEADER + "\n"
    assert ckpt.exists()


def test_zero_learning_rate_changes_only_running_stats(tiny_data):
    model = build_model(SMALL, seed=0)
    head = VerificationHead.zeros(64)
    before = {k: t.data.copy() for k, t in model.items()}
    train(tiny_data, model, head, TrainConfig(lr=0.0, steps=3, batch_size=4))
    for k, t in model.trainable().items():
        assert t.data.tobytes() == before[k].tobytes(), k
    np.testing.assert_array_equal(head.weight.data, 0)


def test_loss_decreases_over_ten_steps_on_fixed_batch(tiny_data):
    model = build_model(SMALL, seed=0)
    head = VerificationHead.zeros(64)
    head.dropout = 0.0
    batch = sample_pair_batch(tiny_data, 8, 0.5, AugmentConfig.identity(), np.random.default_rng(0))
    config = TrainConfig(dropout=0.0)
    state = OptimizerState()
    losses = [train_step(model, head, batch, state, config, np.random.default_rng(0)).loss for _ in range(10)]
    assert abs(losses[0] - np.log(2)) < 1e-6
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_same_seed_same_log(tiny_data):
    def run():
        model = build_model(SMALL, seed=2)
        _, log = train(tiny_data, model, VerificationHead.zeros(64), TrainConfig(steps=4, steps_per_epoch=2, batch_size=4, seed=9))
        return [(r.loss, r.pair_accuracy) for r in log.rows], model

    (a, ma), (b, mb) = run(), run()
    assert a == b and len(a) == 2
    for k in ma:
        assert ma[k].data.tobytes() == mb[k].data.tobytes()


def test_log_and_checkpoint_written_each_epoch(tiny_data, tmp_path):
    model = build_model(SMALL, seed=0)
    head = VerificationHead.zeros(64)
    ckpt, log = train(tiny_data, model, head, TrainConfig(steps=3, steps_per_epoch=2, batch_size=4), out_dir=tmp_path)
    assert ckpt == tmp_path / CHECKPOINT_NAME
    lines = (tmp_path / LOG_NAME).read_text().splitlines()
    assert lines[0] == LOG_HEADER and [line.split(",")[0] for line in lines[1:]] == ["1", "2"]
    loaded, loaded_head = import_checkpoint(build_model(SMALL, seed=5), ckpt, VerificationHead.zeros(64))
    assert loaded_head.weight.data.tobytes() == head.weight.data.tobytes()


def test_divergence_saves_last_good_checkpoint(tiny_data, tmp_path):
    model = build_model(SMALL, seed=0)
    head = VerificationHead.zeros(64)
    model["stem.conv.weight"].data[0, 0, 0, 0] = np.inf
    with pytest.raises(DivergenceError):
        train(tiny_data, model, head, TrainConfig(steps=2, batch_size=4), out_dir=tmp_path)
    assert (tmp_path / CHECKPOINT_NAME).exists()


def test_zero_head_pair_accuracy_is_negative_fraction(tiny_data):
    batch = sample_pair_batch(tiny_data, 10, 0.5, AugmentConfig.identity(), np.random.default_rng(0))
    assert evaluate_pair_accuracy(build_model(SMALL), VerificationHead.zeros(64), batch) == 0.5


def test_separating_head_gives_full_accuracy(tiny_data):
    batch = sample_pair_batch(tiny_data, 10, 0.5, AugmentConfig.identity(), np.random.default_rng(0))
    model = build_model(SMALL)
    # identical inputs give f_s = 0 -> "same" via the bias; distinct inputs get pushed to "different"
    batch.images2[batch.labels == 0] = batch.images1[batch.labels == 0]
    head = VerificationHead(Tensor(np.stack([-np.full(64, 1e3), np.full(64, 1e3)]).astype(np.float32)),
                            Tensor(np.array([1.0, -1.0], np.float32)))
    assert evaluate_pair_accuracy(model, head, batch) == 1.0
