"""Graph engine semantics: evaluation, backward, errors, basic identities."""

import numpy as np
import pytest

from asfseg import autodiff as ad
from asfseg.errors import (GraphUsageError, NumericFaultError,
                           ShapeMismatchError, UsageError)


def test_tensor_validation():
    with pytest.raises(UsageError):
        ad.Tensor(np.zeros((2, 3)))
    with pytest.raises(UsageError):
        ad.Tensor(np.zeros((1, 0, 2, 2)))
    with pytest.raises(NumericFaultError):
        ad.Tensor(np.full((1, 1, 1, 1), np.nan))


def test_tensor_immutable():
    t = ad.Tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        t.numpy()[0, 0, 0, 0] = 5.0


def test_conv_identity_1x1():
    g = ad.conv2d(ad.leaf("x"), ad.leaf("w"), stride=1, pad=0)
    out = ad.evaluate(g, {"x": ad.Tensor([[[[2.25]]]]), "w": ad.Tensor([[[[1.0]]]])})
    assert out.numpy().reshape(()) == np.float32(2.25)


def test_conv_sum_of_nine_ones():
    g = ad.conv2d(ad.leaf("x"), ad.leaf("w"), stride=1, pad=0)
    out = ad.evaluate(g, {"x": ad.Tensor(np.ones((1, 1, 3, 3))),
                          "w": ad.Tensor(np.ones((1, 1, 3, 3)))})
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_evaluate_referentially_transparent(rng):
    x = ad.Tensor(rng.normal(size=(2, 3, 8, 8)))
    w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)))
    g = ad.relu(ad.conv2d(ad.leaf("x"), ad.leaf("w"), stride=1, pad=1))
    a = ad.evaluate(g, {"x": x, "w": w}).numpy()
    b = ad.evaluate(g, {"x": x, "w": w}).numpy()
    assert np.array_equal(a, b)


def test_unbound_leaf_raises():
    g = ad.relu(ad.leaf("x"))
    with pytest.raises(GraphUsageError, match="no binding for leaf 'x'"):
        ad.evaluate(g, {})


def test_shape_mismatch_names_node(rng):
    g = ad.add(ad.leaf("a"), ad.leaf("b"), name="badd")
    with pytest.raises(ShapeMismatchError, match="badd"):
        ad.evaluate(g, {"a": ad.Tensor(np.zeros((1, 2, 4, 4))),
                        "b": ad.Tensor(np.zeros((1, 3, 4, 4)))})


def test_nonfinite_output_is_numeric_fault():
    # divide-free graph: drive sigmoid into overflow via a huge constant mul?
    # exp(-|x|) never overflows, so use bce with an impossible target shape
    # trick instead: feed inf through a leaf is rejected by Tensor, so build
    # the fault inside the graph with a large self-multiplication chain.
    x = ad.leaf("x")
    g = x
    for _ in range(8):
        g = ad.mul(g, g)
    with pytest.raises(NumericFaultError):
        ad.evaluate(g, {"x": ad.Tensor(np.full((1, 1, 1, 1), 1e30))})


def test_backward_before_forward_raises():
    g = ad.relu(ad.leaf("x", requires_grad=True))
    with pytest.raises(GraphUsageError, match="backward"):
        ad.backward(g, ad.Tensor.scalar(1.0))


def test_backward_seed_shape_checked(rng):
    g = ad.relu(ad.leaf("x", requires_grad=True))
    ad.evaluate(g, {"x": ad.Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)})
    with pytest.raises(ShapeMismatchError):
        ad.backward(g, ad.Tensor.scalar(1.0))


def test_sum_backward_is_ones(rng):
    x = ad.Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
    g = ad.tensor_sum(ad.leaf("x", requires_grad=True))
    ad.evaluate(g, {"x": x})
    grads = ad.backward(g, ad.Tensor.scalar(1.0))
    assert np.array_equal(grads["x"].numpy(), np.ones((2, 3, 4, 5), dtype=np.float32))


def test_sigmoid_grad_at_zero():
    g = ad.sigmoid(ad.leaf("x", requires_grad=True))
    ad.evaluate(g, {"x": ad.Tensor.zeros((1, 1, 1, 1), requires_grad=True)})
    grads = ad.backward(g, ad.Tensor.scalar(1.0))
    assert grads["x"].item() == pytest.approx(0.25, abs=1e-7)


def test_gradients_accumulate_over_shared_leaf(rng):
    # y = x*x uses the leaf twice; dy/dx = 2x elementwise
    x = ad.Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
    lx = ad.leaf("x", requires_grad=True)
    g = ad.tensor_sum(ad.mul(lx, ad.leaf("x", requires_grad=True)))
    ad.evaluate(g, {"x": x})
    grads = ad.backward(g, ad.Tensor.scalar(1.0))
    assert np.allclose(grads["x"].numpy(), 2 * x.numpy(), atol=1e-6)


def test_two_layer_conv_graph_matches_finite_differences(rng):
    # pre-activations pushed away from the relu kink so central differences
    # measure the true derivative
    x = ad.Tensor(rng.normal(size=(1, 2, 8, 8)) + 0.5, requires_grad=True)
    w1 = ad.Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.4, requires_grad=True)
    w2 = ad.Tensor(rng.normal(size=(2, 3, 3, 3)) * 0.4, requires_grad=True)
    b1 = ad.Tensor(np.full((1, 3, 1, 1), 0.6), requires_grad=True)
    net = ad.conv2d(ad.leaf("x", requires_grad=True), ad.leaf("w1", requires_grad=True),
                    ad.leaf("b1", requires_grad=True), stride=1, pad=1)
    net = ad.conv2d(ad.relu(net), ad.leaf("w2", requires_grad=True), stride=1, pad=1)
    report = ad.grad_check(ad.mean(net), {"x": x, "w1": w1, "w2": w2, "b1": b1},
                           step=1e-3, tolerance=1e-3)
    assert report.passed, report.failing()


def test_grad_check_linear_graph_zero_error(rng):
    g = ad.tensor_sum(ad.mul(ad.leaf("w", requires_grad=True), ad.leaf("x")))
    report = ad.grad_check(g, {"w": ad.Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True),
                               "x": ad.Tensor(rng.normal(size=(1, 1, 2, 2)))})
    assert report.passed
    assert report.max_rel_err < 1e-4


def test_grad_check_requires_differentiable_leaf(rng):
    g = ad.relu(ad.leaf("x"))
    with pytest.raises(GraphUsageError):
        ad.grad_check(g, {"x": ad.Tensor(rng.normal(size=(1, 1, 2, 2)))})


def test_concat_then_slice_roundtrip(rng):
    a = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    b = rng.normal(size=(2, 5, 4, 4)).astype(np.float32)
    g = ad.concat(ad.leaf("a"), ad.leaf("b"))
    out = ad.evaluate(g, {"a": a, "b": b}).numpy()
    assert np.array_equal(out[:, :3], a)
    assert np.array_equal(out[:, 3:], b)


def test_mul_identity_and_annihilator(rng):
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    g = ad.mul(ad.leaf("x"), ad.leaf("m"))
    ones = np.ones_like(x)
    assert np.array_equal(ad.evaluate(g, {"x": x, "m": ones}).numpy(), x)
    zeros = np.zeros_like(x)
    assert np.array_equal(ad.evaluate(g, {"x": x, "m": zeros}).numpy(), zeros)


def test_general_broadcast_rejected(rng):
    g = ad.mul(ad.leaf("a"), ad.leaf("b"))
    with pytest.raises(ShapeMismatchError):
        ad.evaluate(g, {"a": np.zeros((1, 2, 4, 4), np.float32),
                        "b": np.zeros((1, 2, 2, 4), np.float32)})


def test_bilinear_resize_same_size_is_identity(rng):
    x = rng.normal(size=(2, 3, 7, 9)).astype(np.float32)
    g = ad.resize_bilinear(ad.leaf("x"), 7, 9)
    out = ad.evaluate(g, {"x": x}).numpy()
    assert np.allclose(out, x, atol=1e-6)


def test_batchnorm_train_statistics_match_two_pass_oracle(rng):
    x = rng.normal(1.5, 2.0, size=(4, 3, 6, 6)).astype(np.float32)
    state = ad.BatchNormState(3)
    g = ad.batchnorm2d(ad.leaf("x"), ad.leaf("g"), ad.leaf("b"), state)
    out = ad.evaluate(g, {"x": x, "g": np.ones((1, 3, 1, 1), np.float32),
                          "b": np.zeros((1, 3, 1, 1), np.float32)}).numpy()
    # independent two-pass oracle in float64
    for c in range(3):
        vals = out[:, c].astype(np.float64)
        mu = vals.sum() / vals.size
        var = ((vals - mu) ** 2).sum() / vals.size
        assert abs(mu) < 1e-5
        assert abs(var - 1.0) < 1e-3   # eps=1e-5 shifts variance slightly below 1
    # running stats moved toward the batch stats
    assert not np.allclose(state.running_mean, 0.0)


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
    state = ad.BatchNormState(2)
    state.training = False
    state.running_mean = np.array([1.0, -1.0], np.float32)
    state.running_var = np.array([4.0, 0.25], np.float32)
    g = ad.batchnorm2d(ad.leaf("x"), ad.leaf("g"), ad.leaf("b"), state)
    out = ad.evaluate(g, {"x": x, "g": np.ones((1, 2, 1, 1), np.float32),
                          "b": np.zeros((1, 2, 1, 1), np.float32)}).numpy()
    expect = np.empty_like(x)
    expect[:, 0] = (x[:, 0] - 1.0) / np.sqrt(4.0 + 1e-5)
    expect[:, 1] = (x[:, 1] + 1.0) / np.sqrt(0.25 + 1e-5)
    assert np.allclose(out, expect, atol=1e-6)


def test_evaluate_multi_shares_one_pass(rng):
    x = ad.Tensor(rng.normal(size=(1, 2, 4, 4)))
    base = ad.relu(ad.leaf("x"))
    r1 = ad.mean(base)
    r2 = ad.tensor_sum(base)
    v1, v2 = ad.evaluate_multi([r1, r2], {"x": x})
    assert v2.item() == pytest.approx(v1.item() * 32, rel=1e-5)


def test_fetch_interior_node(rng):
    x = ad.Tensor(rng.normal(size=(1, 1, 2, 2)))
    inner = ad.relu(ad.leaf("x"))
    root = ad.mean(inner)
    ad.evaluate(root, {"x": x})
    got = ad.fetch(root, inner)
    assert np.array_equal(got, np.maximum(x.numpy(), 0))
