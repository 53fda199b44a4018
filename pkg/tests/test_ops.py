import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deltaseg import ops
from deltaseg.tensor import Tensor, default_dtype, no_grad


def conv_loop(x, w, b, stride, pad, dil, groups):
    """Nested-loop cross-correlation reference."""
    n, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    cout_g = cout // groups
    for b_, o, i, j in itertools.product(range(n), range(cout), range(ho), range(wo)):
        g = o // cout_g
        acc = 0.0
        for c in range(cin_g):
            for u in range(k):
                for v in range(k):
                    acc += w[o, c, u, v] * xp[b_, g * cin_g + c, i * stride + u * dil, j * stride + v * dil]
        out[b_, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad,dil,groups", [(1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (1, 1, 1, 4)])
def test_conv2d_matches_loop(stride, pad, dil, groups):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 7, 6))
    spec = ops.ConvSpec(4, 4, 3, stride=stride, padding=pad, dilation=dil, groups=groups)
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
    np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad, dil, groups), atol=1e-10)


def test_grouped_conv_equals_split_convs():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 5, 5))
    spec = ops.ConvSpec(4, 6, 3, padding=1, groups=2)
    w = rng.standard_normal(spec.weight_shape)
    full = ops.conv2d(Tensor(x), Tensor(w), None, spec).data
    half = ops.ConvSpec(2, 3, 3, padding=1)
    a = ops.conv2d(Tensor(x[:, :2]), Tensor(w[:3]), None, half).data
    b = ops.conv2d(Tensor(x[:, 2:]), Tensor(w[3:]), None, half).data
    np.testing.assert_allclose(full, np.concatenate([a, b], axis=1), atol=1e-12)


def test_transposed_conv_is_adjoint():
    # <conv(x), y> == <x, conv_T(y)> with shared weights
    rng = np.random.default_rng(2)
    spec = ops.ConvSpec(3, 5, 3, stride=2, padding=1)
    w = rng.standard_normal(spec.weight_shape)
    x = rng.standard_normal((2, 3, 8, 8))
    y_shape = ops.conv2d(Tensor(x), Tensor(w), None, spec).shape
    y = rng.standard_normal(y_shape)
    tspec = ops.ConvSpec(5, 3, 3, stride=2, padding=1, transposed=True)
    xt = ops.conv2d(Tensor(y), Tensor(w), None, tspec, output_padding=1).data
    assert xt.shape == x.shape
    lhs = np.sum(ops.conv2d(Tensor(x), Tensor(w), None, spec).data * y)
    assert lhs == pytest.approx(np.sum(x * xt), rel=1e-12)


def test_conv_errors_name_dimension():
    spec = ops.ConvSpec(3, 4, 3)
    with pytest.raises(ValueError, match="channel"):
        ops.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros(spec.weight_shape)), None, spec)
    big = ops.ConvSpec(3, 4, 3, dilation=4)
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros(big.weight_shape)), None, big)
    with pytest.raises(ValueError):
        ops.ConvSpec(3, 4, 3, groups=2)


def test_bilinear_hand_values():
    # 2 -> 4 with half-pixel centres: weights (1, .75/.25, .25/.75, 1)
    m = ops.bilinear_matrix(2, 4, np.float64)
    np.testing.assert_allclose(m, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    x = Tensor(np.array([[[[0.0, 4.0], [8.0, 12.0]]]]))
    up = ops.resize_bilinear(x, 4, 4).data[0, 0]
    # row 1 = .75*[0, 4] + .25*[8, 12] = [2, 6], then the same column weights
    np.testing.assert_allclose(up[1], [2.0, 3.0, 5.0, 6.0])
    same = ops.resize_bilinear(x, 2, 2)
    np.testing.assert_array_equal(same.data, x.data)


def test_max_pool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ops.sum(ops.max_pool2d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_pool_window_too_large():
    with pytest.raises(ValueError):
        ops.max_pool2d(Tensor(np.zeros((1, 1, 1, 1))), 2)


def test_relu_subgradient_zero_at_origin():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    ops.sum(ops.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])
    y = Tensor(np.array([-1.0, 3.0, 6.0, 7.0]), requires_grad=True)
    out = ops.relu6(y)
    ops.sum(out).backward()
    np.testing.assert_array_equal(out.data, [0, 3, 6, 6])
    np.testing.assert_array_equal(y.grad, [0, 1, 0, 0])


def test_batch_norm_train_stats():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    out = ops.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True, 1e-5, 0.1).data
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out, (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5), atol=1e-12)
    np.testing.assert_allclose(rm, 0.1 * mu)
    m = x.size // 2
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var * m / (m - 1))


def test_batch_norm_rejects_single_value_channels():
    with pytest.raises(ValueError):
        ops.batch_norm2d(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                         np.zeros(2), np.ones(2), True, 1e-5, 0.1)


def test_softmax_rows_sum_to_one_and_stable():
    x = Tensor(np.array([[1000.0, 1001.0, 999.0]]))
    p = ops.softmax(x, axis=1).data
    assert np.isfinite(p).all()
    assert p.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(np.exp(ops.log_softmax(x, axis=1).data), p)


def test_unit_direction_zero_fallback():
    v = Tensor(np.zeros((1, 3, 1, 1)), requires_grad=True)
    k = ops.unit_direction(v)
    np.testing.assert_array_equal(k.data[0, :, 0, 0], [1, 0, 0])
    ops.sum(k).backward()
    np.testing.assert_array_equal(v.grad, 0)


def test_gradients_accumulate_and_require_seed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ops.sum(x * x).backward()
    ops.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_shared_subexpression_gradient():
    # y = x*x + x reuses x along two paths
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_dtype_float64():
    with default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(3, 9), st.integers(1, 2), st.integers(0, 2), st.integers(1, 2))
def test_conv_output_size_formula(cin, size, stride, pad, dil):
    spec = ops.ConvSpec(cin, 2, 3, stride=stride, padding=pad, dilation=dil)
    if size + 2 * pad < spec.effective_kernel:
        return
    out = ops.conv2d(Tensor(np.zeros((1, cin, size, size))), Tensor(np.zeros(spec.weight_shape)), None, spec)
    assert out.shape[2] == (size + 2 * pad - dil * 2 - 1) // stride + 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12))
def test_bilinear_rows_are_convex(n_in, n_out):
    m = ops.bilinear_matrix(n_in, n_out, np.float64)
    assert (m >= 0).all()
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
