#!/usr/bin/env python3
"""
Test the numpy autodiff engine: forward values against hand-computed and
loop oracles, backward against finite differences.
"""

import math

import numpy as np
import pytest
from scipy.signal import correlate2d

from bfrffusion import autodiff as ad
from bfrffusion.autodiff import Tensor, backward, grad_check, no_grad, use_dtype
from bfrffusion.errors import ConfigurationError, DimensionError, UsageError


def conv_loop_oracle(x, w, b, stride, padding):
    """Six nested loops, no vectorisation"""
    n, c_in, height, width = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (height + 2 * padding - kh) // stride + 1
    w_out = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for i in range(n):
        for o in range(c_out):
            for y in range(h_out):
                for x_ in range(w_out):
                    acc = b[o]
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, c, y * stride + u, x_ * stride + v] * w[o, c, u, v]
                    out[i, o, y, x_] = acc
    return out


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.tensor_sum(ad.ewise(out, Tensor(weights), "mul"))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv2d_pointwise_scaling():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor([[[[2.0]]]]))
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out.data == 2.0)


def test_conv2d_delta_kernel_is_identity(rng):
    x = rng.normal(size=(2, 1, 5, 4))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(kernel), padding=1)
    np.testing.assert_allclose(out.data, x.astype(np.float32), atol=0)


def test_conv2d_matches_loop_oracle(f64, rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    np.testing.assert_allclose(out.data, conv_loop_oracle(x, w, b, 2, 1), atol=1e-6)


def test_depthwise_conv_matches_per_channel_correlation(f64, rng):
    x = rng.normal(size=(1, 3, 6, 5))
    w = rng.normal(size=(3, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), padding=1, groups=3)
    for c in range(3):
        padded = np.pad(x[0, c], 1)
        expected = correlate2d(padded, w[c, 0], mode="valid")
        np.testing.assert_allclose(out.data[0, c], expected, atol=1e-6)


def test_conv2d_errors():
    x = Tensor(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ConfigurationError):
        ad.conv2d(x, Tensor(np.zeros((3, 4, 3, 3))), groups=3)
    with pytest.raises(ConfigurationError):
        ad.conv2d(x, Tensor(np.zeros((2, 4, 2, 2))))
    with pytest.raises(DimensionError):
        ad.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((4, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))


def test_forward_is_deterministic(rng):
    x = Tensor(rng.normal(size=(2, 4, 6, 6)))
    w = Tensor(rng.normal(size=(4, 2, 3, 3)))
    first = ad.conv2d(x, w, padding=1, groups=2).data
    second = ad.conv2d(x, w, padding=1, groups=2).data
    assert first.tobytes() == second.tobytes()


# ---------------------------------------------------------------------------
# normalisation, matmul, softmax, activations
# ---------------------------------------------------------------------------


def test_layer_norm_constant_input_is_zero():
    out = ad.layer_norm(Tensor(np.full((2, 4, 3, 3), 7.5)), 1e-5)
    assert np.all(out.data == 0.0)


def test_layer_norm_hand_value(f64):
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    out = ad.layer_norm(x, 1e-5)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-3)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ConfigurationError):
        ad.layer_norm(Tensor(np.ones((1, 2, 1, 1))), 0.0)


def test_matmul_values(rng):
    a = rng.normal(size=(3, 3))
    np.testing.assert_allclose(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a.astype(np.float32), rtol=1e-6)
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_values(f64):
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    stable = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(stable))
    np.testing.assert_allclose(stable, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900, 0.2447, 0.6652], atol=1e-4)


@pytest.mark.parametrize("magnitude", [1.0, 1e2, 1e4])
def test_softmax_rows_sum_to_one(rng, magnitude):
    x = rng.uniform(-magnitude, magnitude, size=(4, 3, 7))
    for axis in (-1, 1):
        out = ad.softmax(Tensor(x), axis=axis).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


def test_activation_values(f64):
    assert ad.silu(Tensor([0.0])).item() == 0.0
    assert ad.gelu(Tensor([0.0])).item() == 0.0
    assert abs(ad.silu(Tensor([1.0])).item() - 1.0 / (1.0 + math.exp(-1.0))) < 1e-12
    assert abs(ad.silu(Tensor([1.0])).item() - 0.7311) < 1e-4


def test_activation_unknown_kind():
    with pytest.raises(ConfigurationError):
        ad.activation(Tensor([1.0]), "relu")


# ---------------------------------------------------------------------------
# elementwise broadcasting
# ---------------------------------------------------------------------------


def test_ewise_identities(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    assert np.array_equal(ad.ewise(a, Tensor(np.zeros(1)), "add").data, a.data)
    assert np.array_equal(ad.ewise(a, Tensor(np.ones((3, 1, 1))), "mul").data, a.data)


def test_ewise_channel_broadcast_matches_tiling(f64, rng):
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(1, 3, 1, 1))
    tiled = np.tile(b, (2, 1, 4, 4))
    np.testing.assert_array_equal(ad.ewise(Tensor(a), Tensor(b), "add").data, a + tiled)
    np.testing.assert_array_equal(ad.ewise(Tensor(a), Tensor(b), "mul").data, a * tiled)


def test_broadcast_add_gradient_is_reduce_sum(f64, rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)
    backward(ad.tensor_sum(ad.ewise(a, b, "add")))
    np.testing.assert_array_equal(a.grad, np.ones(a.shape))
    np.testing.assert_array_equal(b.grad, np.full(b.shape, 2 * 4 * 5.0))


def test_ewise_rejects_non_broadcastable():
    with pytest.raises(DimensionError):
        ad.ewise(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), "add")
    with pytest.raises(DimensionError):
        ad.ewise(Tensor(np.ones(3)), Tensor(np.ones((2, 3))), "mul")
    with pytest.raises(ConfigurationError):
        ad.ewise(Tensor(np.ones(3)), Tensor(np.ones(3)), "pow")


# ---------------------------------------------------------------------------
# backward and grad_check
# ---------------------------------------------------------------------------


def test_backward_sum_and_square(f64, rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    backward(ad.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    x.zero_grad()
    backward(ad.tensor_sum(ad.ewise(x, x, "mul")))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_across_calls(f64):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ad.tensor_sum(x))
    backward(ad.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        backward(ad.scale(x, 2.0))
    with pytest.raises(UsageError):
        backward(Tensor(1.0))


def test_frozen_leaf_gets_no_grad(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    frozen = Tensor(rng.normal(size=(2, 2)))
    backward(ad.tensor_sum(ad.ewise(x, frozen, "mul")))
    assert frozen.grad is None
    assert x.grad is not None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ad.silu(x)
    assert y.node is None and not y.requires_grad


def test_default_dtype_switch():
    assert Tensor([1.0]).dtype == np.float32
    with use_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ConfigurationError):
        with use_dtype(np.int32):
            pass


def test_grad_check_requires_float64():
    with pytest.raises(UsageError):
        grad_check(ad.tensor_sum, [Tensor(np.ones(3), requires_grad=True)])


def test_grad_check_of_sum_is_exact(f64, rng):
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    assert grad_check(ad.tensor_sum, [x]) < 1e-8


def test_grad_check_of_sum_silu(f64, rng):
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    assert grad_check(lambda t: ad.tensor_sum(ad.silu(t)), [x], h=1e-5) < 1e-6


OP_SHAPES = {
    "silu": [(5,), (2, 3), (2, 3, 2, 2)],
    "gelu": [(5,), (2, 3), (2, 3, 2, 2)],
    "softmax": [(4,), (3, 5), (2, 2, 3, 4)],
    "layer_norm": [(1, 3, 1, 1), (2, 4, 3, 3), (3, 2, 2, 5)],
}


@pytest.mark.parametrize("name", sorted(OP_SHAPES))
@pytest.mark.parametrize("which", range(3))
def test_unary_ops_pass_grad_check(f64, rng, name, which):
    ops = {
        "silu": ad.silu,
        "gelu": ad.gelu,
        "softmax": lambda t: ad.softmax(t, axis=-1),
        "layer_norm": lambda t: ad.layer_norm(t, 1e-5),
    }
    shape = OP_SHAPES[name][which]
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    weights = rng.normal(size=shape)
    tolerance = 1e-4 if name in ("silu", "gelu") else 1e-3
    assert grad_check(lambda t: weighted_sum(ops[name](t), weights), [x]) < tolerance


CONV_CASES = [
    dict(x=(1, 2, 4, 4), w=(3, 2, 3, 3), stride=2, padding=1, groups=1),
    dict(x=(2, 4, 5, 3), w=(4, 2, 3, 3), stride=1, padding=1, groups=2),
    dict(x=(1, 3, 4, 4), w=(3, 1, 3, 3), stride=1, padding=1, groups=3),
    dict(x=(2, 2, 3, 3), w=(5, 2, 1, 1), stride=1, padding=0, groups=1),
]


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_passes_grad_check(f64, rng, case):
    x = Tensor(rng.normal(size=case["x"]), requires_grad=True)
    w = Tensor(rng.normal(size=case["w"]), requires_grad=True)
    b = Tensor(rng.normal(size=case["w"][0]), requires_grad=True)

    def f(x_, w_, b_):
        out = ad.conv2d(x_, w_, b_, stride=case["stride"], padding=case["padding"], groups=case["groups"])
        return weighted_sum(out, weights)

    with no_grad():
        shaped = ad.conv2d(x, w, b, stride=case["stride"], padding=case["padding"], groups=case["groups"])
    weights = rng.normal(size=shaped.shape)
    assert grad_check(f, [x, w, b]) < 1e-3


@pytest.mark.parametrize("a_shape,b_shape", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 2, 3, 4), (2, 1, 4, 3))])
def test_matmul_passes_grad_check(f64, rng, a_shape, b_shape):
    a = Tensor(rng.normal(size=a_shape), requires_grad=True)
    b = Tensor(rng.normal(size=b_shape), requires_grad=True)
    weights = rng.normal(size=np.matmul(a.data, b.data).shape)
    assert grad_check(lambda x, y: weighted_sum(ad.matmul(x, y), weights), [a, b]) < 1e-3


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
@pytest.mark.parametrize("a_shape,b_shape", [((3, 4), (4,)), ((2, 3, 2, 2), (3, 1, 1)), ((2, 5), (2, 5))])
def test_ewise_passes_grad_check(f64, rng, kind, a_shape, b_shape):
    a = Tensor(rng.normal(size=a_shape), requires_grad=True)
    b = Tensor(rng.uniform(1.0, 2.0, size=b_shape), requires_grad=True)
    weights = rng.normal(size=a_shape)
    assert grad_check(lambda x, y: weighted_sum(ad.ewise(x, y, kind), weights), [a, b]) < 1e-3


def test_shape_plumbing_passes_grad_check(f64, rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)

    def f(x_, y_):
        packed = ad.space_to_depth(x_, 2)
        joined = ad.concat([packed, ad.upsample_nearest(ad.slice_axis(y_, 1, 0, 2), 1)], axis=1)
        parts = ad.split(joined, 2, axis=1)
        return ad.tensor_sum(ad.ewise(ad.tensor_mean(parts[0], axis=(2, 3)), ad.tensor_mean(parts[1], axis=(2, 3)), "mul"))

    assert grad_check(f, [x, y]) < 1e-3


def test_space_to_depth_round_trip(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 4)))
    packed = ad.space_to_depth(x, 4)
    assert packed.shape == (2, 48, 2, 1)
    assert np.array_equal(ad.depth_to_space(packed, 4).data, x.data)
    with pytest.raises(ConfigurationError):
        ad.space_to_depth(Tensor(np.zeros((1, 3, 6, 6))), 4)


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.mse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


if __name__ == "__main__":
    print("🧪 Testing autodiff engine...")
    raise SystemExit(pytest.main([__file__, "-v"]))
