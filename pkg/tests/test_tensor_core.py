#!/usr/bin/env python3
"""
Tests for the tensor_core module.

Covers forward values against numpy, broadcasting gradients, gradient
accumulation, graph recording control, the depth-wise convolution and the
multiply-accumulate counter.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from tensor_core import (
    Tensor, EmptyReduction, InvalidKernel, NotScalar, ShapeMismatch, backward, count_macs, depthwise_conv2d,
    gelu, is_grad_enabled, log_softmax_lastdim, matmul, no_grad, reduce_moments, relu, softmax_lastdim,
)
from verify import gradcheck_op


def test_default_precision_and_dtype_preservation():
    """Integer data becomes float32; float64 data stays float64."""
    assert Tensor([1, 2, 3]).dtype == np.float32, "Integer input should default to float32"
    assert Tensor(np.zeros(3)).dtype == np.float64, "float64 input should keep its precision"
    t = Tensor(np.ones((2, 3), dtype=np.float32)) + 1.0
    assert t.dtype == np.float32, "Python scalars should not promote float32 tensors"
    print("✓ Precision tests passed")


def test_broadcast_add_gradient():
    """Gradients of broadcast operands are summed over the stretched axes."""
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    backward((a + b).sum())
    assert np.array_equal(a.grad.data, np.ones((3, 4))), "d(sum)/da should be ones"
    assert np.array_equal(b.grad.data, np.full(4, 3.0)), "d(sum)/db should count the 3 broadcast rows"
    print("✓ Broadcast gradient tests passed")


def test_matmul_matches_numpy():
    """Forward matches numpy and gradients follow the matmul rule."""
    rng = np.random.default_rng(0)
    a_np, b_np = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    a, b = Tensor(a_np, requires_grad=True), Tensor(b_np, requires_grad=True)
    out = matmul(a, b)
    assert np.allclose(out.data, a_np @ b_np), "matmul forward should match numpy"

    backward(out.sum())
    ones = np.ones((2, 3, 5))
    assert np.allclose(a.grad.data, ones @ b_np.T), "grad_a should be G @ B^T"
    assert np.allclose(b.grad.data, np.einsum("bik,bij->kj", a_np, ones)), "grad_b should be summed over the batch"

    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    print("✓ Matmul tests passed")


def test_gradient_accumulates_across_uses():
    """A tensor used twice receives the sum of both contributions."""
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward((x * x + x).sum())
    assert np.allclose(x.grad.data, 2 * x.data + 1), "grad should be 2x + 1"

    # a second backward accumulates on top
    backward((x * 2.0).sum())
    assert np.allclose(x.grad.data, 2 * x.data + 3), "repeated backward should accumulate"
    x.zero_grad()
    assert x.grad is None, "zero_grad should clear the gradient"


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NotScalar):
        backward(x * 2.0)


def test_mean_of_empty_axis_raises():
    with pytest.raises(EmptyReduction):
        Tensor(np.zeros((0, 3))).mean(axis=0)
    with pytest.raises(EmptyReduction):
        reduce_moments(Tensor(np.zeros((0, 3))), 0)


def test_no_grad_disables_recording():
    """Inside no_grad results carry no graph; the flag is restored afterwards."""
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled(), "Recording should be off inside no_grad"
        y = x * 3.0
    assert is_grad_enabled(), "Recording should be restored after no_grad"
    assert not y.requires_grad and y._ctx is None, "No graph should be recorded under no_grad"


def test_reduce_moments_population_variance():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(6, 5))
    mean, var = reduce_moments(Tensor(data), 0)
    assert np.allclose(mean.data, data.mean(axis=0)), "mean should match numpy"
    assert np.allclose(var.data, data.var(axis=0)), "variance should divide by the element count"
    mean_k, var_k = reduce_moments(Tensor(data), -1, keepdims=True)
    assert mean_k.shape == (6, 1) and var_k.shape == (6, 1), "keepdims should keep reduced axes"


def test_relu_gradient_is_zero_at_origin():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    backward(relu(x).sum())
    assert np.array_equal(x.grad.data, [0.0, 0.0, 1.0]), "ReLU gradient uses the mask x > 0"


def test_softmax_is_stable_and_normalized():
    """Rows sum to one even for large logits; log-softmax agrees with log of softmax."""
    logits = Tensor(np.array([[1000.0, 1001.0, 1002.0], [-5.0, 0.0, 5.0]]))
    probs = softmax_lastdim(logits)
    assert np.all(np.isfinite(probs.data)), "softmax should not overflow"
    assert np.allclose(probs.data.sum(axis=-1), 1.0), "softmax rows should sum to 1"
    assert np.allclose(log_softmax_lastdim(logits).data, np.log(probs.data)), "log-softmax should match"
    single = softmax_lastdim(Tensor(np.array([[3.0]])))
    assert np.array_equal(single.data, [[1.0]]), "a single column softmaxes to 1"


def test_gelu_reference_values():
    x = Tensor(np.array([-3.0, 0.0, 1.0, 3.0]))
    expected = 0.5 * x.data * (1 + np.tanh(np.sqrt(2 / np.pi) * (x.data + 0.044715 * x.data ** 3)))
    assert np.allclose(gelu(x).data, expected), "GELU should use the tanh approximation"


def test_depthwise_conv_identity_and_errors():
    """A centred delta kernel is the identity; invalid kernels are rejected."""
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 3, 4, 5)))
    kernel = np.zeros((3, 3, 3))
    kernel[:, 1, 1] = 1.0
    assert np.allclose(depthwise_conv2d(x, Tensor(kernel)).data, x.data), "delta kernel should copy the input"

    shifted = np.zeros((3, 3, 3))
    shifted[:, 1, 2] = 1.0  # picks the right neighbour, zero padded at the border
    out = depthwise_conv2d(x, Tensor(shifted)).data
    assert np.allclose(out[..., :-1], x.data[..., 1:]), "off-centre tap should shift the image"
    assert np.allclose(out[..., -1], 0.0), "zero padding should fill the border"

    with pytest.raises(InvalidKernel):
        depthwise_conv2d(x, Tensor(np.ones((3, 2, 2))))
    with pytest.raises(ShapeMismatch):
        depthwise_conv2d(x, Tensor(np.ones((4, 3, 3))))
    print("✓ Depth-wise convolution tests passed")


def test_mac_counter_counts_matmul_and_conv():
    with count_macs() as counter:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
        depthwise_conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((2, 3, 3))))
    assert counter.by_op["matmul"] == 2 * 4 * 3, "matmul MACs should be out.size * K"
    assert counter.by_op["depthwise_conv2d"] == 2 * 4 * 4 * 9, "conv MACs should be x.size * k^2"
    assert counter.total == 24 + 288, "total should sum both kernels"

    matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert counter.total == 312, "counting should stop when the block exits"


@pytest.mark.parametrize("name", ["div", "pow", "exp", "log", "tanh", "gelu", "softmax_lastdim", "depthwise_conv2d"])
def test_gradients_match_finite_differences(name):
    """Directional derivatives agree with central differences in float64."""
    from verify import GRAD_CASES

    make_inputs, fn = GRAD_CASES[name]
    err = gradcheck_op(make_inputs, fn, np.random.default_rng(3), samples=10)
    assert err <= 1e-4, f"{name}: relative error {err:.3e} exceeds 1e-4"


def main():
    """Run all tests."""
    print("Tensor Core Test Suite")
    print("=" * 40)
    test_default_precision_and_dtype_preservation()
    test_broadcast_add_gradient()
    test_matmul_matches_numpy()
    test_depthwise_conv_identity_and_errors()
    print("\n" + "=" * 40)
    print("✅ All tests passed successfully!")


if __name__ == "__main__":
    main()
