import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svreid import ops
from svreid.backbone import BackboneConfig, build_model, forward_features
from svreid.errors import ContractViolation
from svreid.head import (
    PairLabel,
    VerificationHead,
    head_logits,
    pair_score,
    square_layer,
    verification_forward,
    verification_loss,
)
from svreid.tensor import Tensor

LN2 = math.log(2)


def test_pair_label_targets():
    assert PairLabel.SAME.one_hot == (1, 0)
    assert PairLabel.DIFFERENT.one_hot == (0, 1)


def test_square_layer_values():
    out = square_layer(Tensor(np.array([[3.0, 1.0]])), Tensor(np.array([[1.0, 2.0]])))
    np.testing.assert_array_equal(out.data, [[4.0, 1.0]])
    same = np.random.default_rng(0).standard_normal((2, 5))
    np.testing.assert_array_equal(square_layer(Tensor(same), Tensor(same)).data, 0)
    with pytest.raises(ContractViolation):
        square_layer(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4))))


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float32, (3, 8), elements=st.floats(-1e3, 1e3, width=32)),
    arrays(np.float32, (3, 8), elements=st.floats(-1e3, 1e3, width=32)),
)
def test_square_layer_bit_symmetric(a, b):
    assert square_layer(Tensor(a), Tensor(b)).data.tobytes() == square_layer(Tensor(b), Tensor(a)).data.tobytes()


def test_zero_head_gives_half():
    head = VerificationHead.zeros(16)
    fs = Tensor(np.abs(np.random.default_rng(1).standard_normal((5, 16))).astype(np.float32))
    np.testing.assert_array_equal(verification_forward(head, fs), 0.5)


def test_head_width_mismatch():
    with pytest.raises(ContractViolation):
        verification_forward(VerificationHead.zeros(16), Tensor(np.ones((2, 8))))


def test_loss_values():
    assert verification_loss([[0.5, 0.5]], [PairLabel.SAME]) == pytest.approx(0.693147, abs=1e-6)
    assert verification_loss([[1.0, 0.0]], [PairLabel.SAME]) == 0.0
    assert verification_loss([[0.5, 0.5], [1.0, 0.0]], [0, 0]) == pytest.approx(0.346574, abs=1e-6)


def test_loss_matches_fused_op():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((6, 2))
    labels = rng.integers(0, 2, 6)
    fused, probs = ops.softmax_cross_entropy(Tensor(logits), labels)
    assert verification_loss(probs, labels) == pytest.approx(float(fused.data), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_zero_head_loss_is_ln2_on_any_batch(seed, n):
    rng = np.random.default_rng(seed)
    head = VerificationHead.zeros(8)
    fs = Tensor(rng.exponential(size=(n, 8)).astype(np.float32))
    labels = rng.integers(0, 2, n)
    logits = head_logits(head, fs, training=True, rng=rng)
    loss, _ = ops.softmax_cross_entropy(logits, labels)
    assert abs(float(loss.data) - LN2) <= 1e-6


def test_eval_forward_repeatable():
    rng = np.random.default_rng(3)
    head = VerificationHead(Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal(2)))
    fs = Tensor(rng.random((3, 4)))
    a, b = verification_forward(head, fs), verification_forward(head, fs)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-12)


@pytest.fixture(scope="module")
def model():
    return build_model(BackboneConfig(), seed=4)


def test_identical_images_zero_head_score_half(model):
    img = np.random.default_rng(5).standard_normal((3, 160, 80)).astype(np.float32)
    assert pair_score(model, VerificationHead.zeros(64), img, img) == 0.5


def test_pair_score_swap_symmetric(model):
    rng = np.random.default_rng(6)
    head = VerificationHead(Tensor(rng.standard_normal((2, 64)).astype(np.float32)), Tensor(np.zeros(2, np.float32)))
    a, b = rng.standard_normal((2, 3, 160, 80)).astype(np.float32)
    assert pair_score(model, head, a, b) == pair_score(model, head, b, a)


def test_pair_score_resolution_error(model):
    with pytest.raises(ContractViolation):
        pair_score(model, VerificationHead.zeros(64), np.zeros((3, 80, 40)), np.zeros((3, 80, 40)))


def test_siamese_branches_share_parameters(monkeypatch):
    """Both branches of a training step read the very same parameter map."""
    from svreid import train as train_mod
    from svreid.data import generate_synthetic, sample_pair_batch

    seen = []
    real = train_mod.forward_features

    def spy(params, images, training=False):
        seen.append(params)
        return real(params, images, training)

    monkeypatch.setattr(train_mod, "forward_features", spy)
    config = BackboneConfig(height=32, width=16)
    model = build_model(config)
    ds = generate_synthetic(3, 1, 1, 32, 16)
    batch = sample_pair_batch(ds, 4, 0.5, rng=np.random.default_rng(0), augment_rng=np.random.default_rng(1))
    train_mod.train_step(model, VerificationHead.zeros(64), batch, train_mod.OptimizerState(),
                         train_mod.TrainConfig(), np.random.default_rng(2))
    assert len(seen) == 2 and seen[0] is seen[1] is model
