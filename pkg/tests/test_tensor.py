import numpy as np
import pytest

from svreid import ops
from svreid.errors import ContractViolation
from svreid.tensor import Tensor, backward, zero_grad


def test_sum_of_parameter_gives_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    grads = backward(w.sum(), {"w": w})
    np.testing.assert_array_equal(grads["w"], np.ones((2, 3)))


def test_parameter_used_twice_doubles_gradient():
    w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward((w + w).sum())
    np.testing.assert_array_equal(w.grad, 2 * np.ones(3))


def test_repeated_use_through_product_sums_contributions():
    # d/dw sum(w * w) = 2w
    w = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
    backward((w * w).sum())
    np.testing.assert_allclose(w.grad, 2 * w.data, rtol=0, atol=1e-15)


def test_two_layer_linear_chain_matches_hand_derivation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5))
    w1 = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    w2 = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    loss = ops.linear(ops.linear(Tensor(x), w1), w2).sum()
    backward(loss)
    # L = 1^T (x W1^T W2^T) 1, so dL/dW2 = 1 (x W1^T)... summed over rows
    h = x @ w1.data.T
    ones = np.ones((4, 2))
    np.testing.assert_allclose(w2.grad, ones.T @ h, rtol=0, atol=1e-10)
    np.testing.assert_allclose(w1.grad, (ones @ w2.data).T @ x, rtol=0, atol=1e-10)


def test_unreachable_parameter_gets_zero():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    grads = backward(a.sum(), {"a": a, "b": b})
    np.testing.assert_array_equal(grads["b"], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractViolation):
        backward(a * a)


def test_broadcast_add_reduces_gradient_to_operand_shape():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    backward((x + b).sum())
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_zero_grad_clears_accumulation():
    w = Tensor(np.ones(2), requires_grad=True)
    backward(w.sum())
    backward(w.sum())
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])
    zero_grad([w])
    assert w.grad is None


def test_no_graph_without_requires_grad():
    a = Tensor(np.ones(3))
    out = a * a
    assert out._parents == ()


def test_integer_input_becomes_float32_and_float64_is_kept():
    assert Tensor(np.arange(3)).dtype == np.float32
    assert (Tensor(np.ones(2, dtype=np.float64)) * 2.0).dtype == np.float64


def test_deep_chain_does_not_recurse():
    w = Tensor(np.ones(1), requires_grad=True)
    h = w
    for _ in range(5000):
        h = h + w
    backward(h.sum())
    np.testing.assert_array_equal(w.grad, [5001.0])
