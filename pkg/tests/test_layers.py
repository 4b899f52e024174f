import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dva import gradcheck as gc
from dva import layers as L
from dva.errors import ShapeError


def naive_conv(x, w, b, stride, pad):
    """Six nested loops over (n, oc, oy, ox, ic, ky, kx) -- direct cross-correlation."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(n):
        for o in range(oc):
            for y in range(oh):
                for xx in range(ow):
                    acc = b[o]
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[i, ci, y * stride + ky, xx * stride + kx] * w[o, ci, ky, kx]
                    out[i, o, y, xx] = acc
    return out


def naive_deconv(x, w, b, stride, pad):
    """Scatter every input pixel through the kernel, then crop the padding."""
    n, ic, h, wd = x.shape
    _, oc, kh, kw = w.shape
    full = np.zeros((n, oc, stride * (h - 1) + kh, stride * (wd - 1) + kw))
    for i in range(n):
        for ci in range(ic):
            for y in range(h):
                for xx in range(wd):
                    full[i, :, y * stride:y * stride + kh, xx * stride:xx * stride + kw] += x[i, ci, y, xx] * w[ci]
    oh, ow = full.shape[2] - 2 * pad, full.shape[3] - 2 * pad
    return full[:, :, pad:pad + oh, pad:pad + ow] + b[None, :, None, None]


def fd_check(f, x, analytic, tol=1e-5):
    coords, num, skipped = gc.numeric_grad(f, x)
    assert not skipped.any()
    assert gc.rel_error(analytic.reshape(-1)[coords], num) < tol


# --- convolution -----------------------------------------------------------


def test_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
    p = L.ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(L.conv_forward(x, p), x)
    d = np.random.default_rng(1).standard_normal(x.shape)
    assert np.array_equal(L.conv_backward(x, p, d).d_input, d)


def test_all_ones_counts():
    out = L.conv_forward(np.ones((1, 1, 3, 3)), L.ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1)))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_conv_matches_six_loop_oracle(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(L.conv_forward(x, L.ConvParams(w, b, stride, pad)), naive_conv(x, w, b, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_errors():
    p = L.ConvParams(np.ones((2, 3, 3, 3)), np.zeros(2), stride=2)
    with pytest.raises(ShapeError):
        L.conv_forward(np.ones((1, 2, 5, 5)), p)  # channel mismatch
    with pytest.raises(ShapeError):
        L.conv_forward(np.ones((1, 3, 6, 6)), p)  # (6-3)/2 not integral
    with pytest.raises(ShapeError):
        L.ConvParams(np.ones((2, 3, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        L.conv_backward(np.ones((1, 3, 5, 5)), p, np.ones((1, 2, 3, 3)))


def test_conv_backward_zero_and_fd():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 6, 6))
    p = L.ConvParams(rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2), 1, 1)
    g0 = L.conv_backward(x, p, np.zeros((1, 2, 6, 6)))
    assert not (g0.d_input.any() or g0.d_weights.any() or g0.d_bias.any())
    R = rng.standard_normal((1, 2, 6, 6))
    g = L.conv_backward(x, p, R)
    f = lambda: float(np.sum(R * L.conv_forward(x, p)))
    fd_check(f, x, g.d_input)
    fd_check(f, p.weights, g.d_weights)
    fd_check(f, p.bias, g.d_bias)


# --- deconvolution --------------------------------------------------------


def test_deconv_single_value():
    out = L.deconv_forward(np.full((1, 1, 1, 1), 2.5), L.DeconvParams(np.ones((1, 1, 2, 2)), np.zeros(1), 2, 0))
    assert out.shape == (1, 1, 2, 2) and np.all(out == 2.5)


@pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (8, 8)])
def test_deconv_doubles(h, w):
    p = L.DeconvParams(np.ones((2, 3, 4, 4)), np.zeros(3))
    assert L.deconv_forward(np.ones((1, 2, h, w)), p).shape == (1, 3, 2 * h, 2 * w)


@pytest.mark.parametrize("k,s,pad", [(4, 2, 1), (2, 2, 0), (3, 1, 1), (5, 3, 2)])
def test_deconv_matches_scatter_oracle(k, s, pad):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 3, 4))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(L.deconv_forward(x, L.DeconvParams(w, b, s, pad)), naive_deconv(x, w, b, s, pad),
                               rtol=1e-12, atol=1e-12)


def test_deconv_kernel_must_cover_stride():
    with pytest.raises(ShapeError):
        L.DeconvParams(np.ones((1, 1, 1, 1)), np.zeros(1), stride=2)


def test_deconv_backward_zero_and_fd():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 3, 3))
    p = L.DeconvParams(rng.standard_normal((2, 2, 4, 4)), rng.standard_normal(2))
    g0 = L.deconv_backward(x, p, np.zeros((1, 2, 6, 6)))
    assert not (g0.d_input.any() or g0.d_weights.any() or g0.d_bias.any())
    R = rng.standard_normal((1, 2, 6, 6))
    g = L.deconv_backward(x, p, R)
    f = lambda: float(np.sum(R * L.deconv_forward(x, p)))
    fd_check(f, x, g.d_input)
    fd_check(f, p.weights, g.d_weights)
    fd_check(f, p.bias, g.d_bias)


def test_deconv_input_gradient_is_conv_forward():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((3, 2, 4, 4))
    x = rng.standard_normal((1, 3, 4, 4))
    d = rng.standard_normal((1, 2, 8, 8))
    g = L.deconv_backward(x, L.DeconvParams(w, np.zeros(2)), d)
    np.testing.assert_allclose(g.d_input, L.conv_forward(d, L.ConvParams(w, np.zeros(3), 2, 1)), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5),
       st.integers(0, 2**31))
def test_conv_adjointness(n, ci, co, h, w, seed):
    rng = np.random.default_rng(seed)
    p = L.ConvParams(rng.standard_normal((co, ci, 3, 3)), np.zeros(co), 1, 1)
    x = rng.standard_normal((n, ci, h, w))
    y = rng.standard_normal((n, co, h, w))
    lhs = float(np.sum(L.conv_forward(x, p) * y))
    rhs = float(np.sum(x * L.conv_backward_input(y, p, x.shape)))
    assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1e-300) + 1e-12


# --- pooling / pointwise ----------------------------------------------------


def test_maxpool_examples():
    out, idx = L.maxpool_forward(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert out.item() == 4 and idx.item() == 3
    c, _ = L.maxpool_forward(np.full((1, 2, 4, 6), 3.0))
    assert c.shape == (1, 2, 2, 3) and np.all(c == 3.0)


def test_maxpool_brute_force():
    x = np.random.default_rng(8).standard_normal((2, 3, 8, 8))
    out, _ = L.maxpool_forward(x)
    ref = np.array([[[[x[n, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(4)] for i in range(4)]
                     for c in range(3)] for n in range(2)])
    assert np.array_equal(out, ref)


def test_maxpool_rejects_odd_dims_and_other_windows():
    with pytest.raises(ShapeError):
        L.maxpool_forward(np.ones((1, 1, 3, 4)))
    with pytest.raises(ValueError):
        L.maxpool_forward(np.ones((1, 1, 4, 4)), window=3)


def test_maxpool_backward_fd():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 2, 6, 6))
    R = rng.standard_normal((1, 2, 3, 3))
    _, idx = L.maxpool_forward(x)
    f = lambda: float(np.sum(R * L.maxpool_forward(x)[0]))
    fd_check(f, x, L.maxpool_backward(R, idx, x.shape))


def test_relu_examples_and_gradient():
    assert L.relu(np.array([-1.0, 2.0, 0.0]).reshape(1, 1, 1, 3)).ravel().tolist() == [0, 2, 0]
    x = np.array([-1.0, 0.0, 3.0]).reshape(1, 1, 1, 3)
    assert L.relu_backward(x, np.ones_like(x)).ravel().tolist() == [0, 0, 1]  # gradient at 0 is 0


def test_sigmoid_examples():
    assert L.sigmoid(np.zeros((1, 1, 1, 1))).item() == 0.5
    assert abs(L.sigmoid(np.full((1, 1, 1, 1), 40.0)).item() - 1.0) < 1e-12
    assert np.isfinite(L.sigmoid(np.full((1, 1, 1, 1), -1000.0))).all()


def test_pointwise_fd():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 2, 6, 6))
    x[np.abs(x) < 1e-3] = 0.5
    R = rng.standard_normal(x.shape)
    fd_check(lambda: float(np.sum(R * L.relu(x))), x, L.relu_backward(x, R))
    fd_check(lambda: float(np.sum(R * L.sigmoid(x))), x, L.sigmoid_backward(L.sigmoid(x), R))


def test_shape_algebra():
    x = np.random.default_rng(11).standard_normal((1, 2, 8, 6))
    same = L.conv_forward(x, L.ConvParams(np.ones((2, 2, 3, 3)), np.zeros(2), 1, 1))
    assert same.shape == x.shape
    pooled, _ = L.maxpool_forward(x)
    assert pooled.shape == (1, 2, 4, 3)
    up = L.deconv_forward(pooled, L.DeconvParams(np.ones((2, 2, 4, 4)), np.zeros(2)))
    assert up.shape == x.shape


def test_bilinear_kernel_interpolates():
    k = L.bilinear_kernel(4)
    np.testing.assert_allclose(k, np.outer([0.25, 0.75, 0.75, 0.25], [0.25, 0.75, 0.75, 0.25]))
    # a constant map stays constant in the interior after fixed 2x upsampling
    up = L.deconv_forward(np.ones((1, 1, 4, 4)), L.DeconvParams(k[None, None], np.zeros(1)))
    assert np.allclose(up[0, 0, 1:-1, 1:-1], 1.0)


def test_record_switches_logs_patterns():
    x = np.random.default_rng(12).standard_normal((1, 1, 4, 4))
    with L.record_switches() as log:
        L.maxpool_forward(L.relu(x))
    assert len(log) == 2
    assert L._switch_log is None
