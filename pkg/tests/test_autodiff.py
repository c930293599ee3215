import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dualcodec import autodiff as ad
from dualcodec.autodiff import GradientError, Tensor, finite_diff_check

from conftest import weighted

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def naive_conv1d(x, w, b, stride, pad, dilation):
    bsz, c_in, _ = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), pad))
    t_out = (xp.shape[2] - (k - 1) * dilation - 1) // stride + 1
    out = np.zeros((bsz, c_out, t_out))
    for n in range(bsz):
        for o in range(c_out):
            for t in range(t_out):
                for i in range(c_in):
                    for j in range(k):
                        out[n, o, t] += w[o, i, j] * xp[n, i, t * stride + j * dilation]
    return out + b[None, :, None]


def naive_conv_transpose1d(x, w, b, stride, crop):
    bsz, c_in, t_in = x.shape
    _, c_out, k = w.shape
    full = np.zeros((bsz, c_out, (t_in - 1) * stride + k))
    for n in range(bsz):
        for i in range(c_in):
            for t in range(t_in):
                for o in range(c_out):
                    full[n, o, t * stride : t * stride + k] += x[n, i, t] * w[i, o]
    return full[:, :, crop[0] : full.shape[2] - crop[1]] + b[None, :, None]


@pytest.mark.parametrize("stride,pad,dilation,k", [(1, (3, 3), 1, 7), (2, (1, 1), 1, 4), (3, (0, 2), 1, 6),
                                                   (1, (9, 9), 3, 7), (5, (2, 3), 1, 10), (4, (0, 0), 1, 3)])
def test_conv1d_matches_loop_oracle(rng, stride, pad, dilation, k):
    x = rng.normal(size=(2, 3, 23))
    w = rng.normal(size=(4, 3, k))
    b = rng.normal(size=4)
    got = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, dilation=dilation).data
    np.testing.assert_allclose(got, naive_conv1d(x, w, b, stride, pad, dilation), atol=1e-12)


@pytest.mark.parametrize("stride,k,crop", [(2, 4, (1, 1)), (5, 10, (2, 3)), (3, 5, (0, 0)), (4, 8, (2, 2))])
def test_conv_transpose1d_matches_loop_oracle(rng, stride, k, crop):
    x = rng.normal(size=(2, 3, 7))
    w = rng.normal(size=(3, 2, k))
    b = rng.normal(size=2)
    got = ad.conv_transpose1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, crop=crop).data
    np.testing.assert_allclose(got, naive_conv_transpose1d(x, w, b, stride, crop), atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("stride,pad,dilation", [(1, (3, 3), 1), (2, (1, 2), 1), (1, (6, 6), 2), (3, (0, 0), 1)])
def test_conv1d_gradients(seed, stride, pad, dilation):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 3, 17))
    w = r.normal(size=(4, 3, 6 if stride == 3 else 4))
    b = r.normal(size=4)
    f_x = weighted(lambda t: ad.conv1d(t, Tensor(w), Tensor(b), stride, pad, dilation))
    f_w = weighted(lambda t: ad.conv1d(Tensor(x), t, Tensor(b), stride, pad, dilation))
    f_b = weighted(lambda t: ad.conv1d(Tensor(x), Tensor(w), t, stride, pad, dilation))
    assert finite_diff_check(f_x, x) < 1e-5
    assert finite_diff_check(f_w, w) < 1e-5
    assert finite_diff_check(f_b, b) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_conv_transpose1d_gradients(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 3, 6))
    w = r.normal(size=(3, 2, 8))
    b = r.normal(size=2)
    crop = (2, 2)
    assert finite_diff_check(weighted(lambda t: ad.conv_transpose1d(t, Tensor(w), Tensor(b), 4, crop)), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.conv_transpose1d(Tensor(x), t, Tensor(b), 4, crop)), w) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.conv_transpose1d(Tensor(x), Tensor(w), t, 4, crop)), b) < 1e-5


def test_depthwise_conv_gradients(rng):
    x = rng.normal(size=(2, 3, 12))
    w = rng.normal(size=(3, 7))
    assert finite_diff_check(weighted(lambda t: ad.depthwise_conv1d(t, Tensor(w), None, 3)), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.depthwise_conv1d(Tensor(x), t, None, 3)), w) < 1e-5


def test_rfft_matches_dft_matrix(rng):
    n = 16
    x = rng.normal(size=(3, n))
    dft = np.exp(-2j * np.pi * np.outer(np.arange(n // 2 + 1), np.arange(n)) / n)
    re, im = ad.rfft_parts(Tensor(x))
    np.testing.assert_allclose(re.data, x @ dft.real.T, atol=1e-12)
    np.testing.assert_allclose(im.data, x @ dft.imag.T, atol=1e-12)


@pytest.mark.parametrize("n", [8, 9, 32])
def test_rfft_gradient(rng, n):
    x = rng.normal(size=(2, n))
    assert finite_diff_check(weighted(lambda t: ad.rfft_parts(t)[0]), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.rfft_parts(t)[1], 1), x) < 1e-5


def test_frames_and_reflect_pad_gradients(rng):
    x = rng.normal(size=(2, 30))
    assert finite_diff_check(weighted(lambda t: ad.frames(t, 8, 3)), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.pad_last(t, 5, 4, mode="reflect")), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.pad_last(t, 2, 3)), x) < 1e-5


def test_frames_layout(rng):
    x = rng.normal(size=(1, 10))
    fr = ad.frames(Tensor(x), 4, 3).data
    assert fr.shape == (1, 3, 4)
    np.testing.assert_array_equal(fr[0, 2], x[0, 6:10])


@pytest.mark.parametrize("name,op,lo", [
    ("exp", ad.exp, -2), ("log", ad.log, 0.5), ("sqrt", ad.sqrt, 0.5), ("sin", ad.sin, -3),
    ("tanh", ad.tanh, -3), ("gelu", ad.gelu, -3), ("square", lambda t: t ** 2, -3),
    ("recip", lambda t: 1.0 / t, 0.5),
])
def test_elementwise_gradients(name, op, lo):
    for seed in range(10):
        x = np.random.default_rng(seed).uniform(lo, lo + 3, size=(4, 5))
        assert finite_diff_check(weighted(op, seed), x) < 1e-5, name


def test_nonsmooth_ops_away_from_kinks(rng):
    x = rng.uniform(0.2, 1.0, size=20) * rng.choice([-1, 1], size=20)
    assert finite_diff_check(weighted(ad.absolute), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.clamp_min(t, 0.0)), x) < 1e-5


def test_clamp_min_zero_gradient_below_floor():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    ad.tsum(ad.clamp_min(x, 0.5)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_magnitude_gradient_and_origin():
    rng = np.random.default_rng(0)
    re = rng.normal(size=10)
    im = Tensor(rng.normal(size=10))
    assert finite_diff_check(weighted(lambda t: ad.magnitude(t, im)), re) < 1e-5
    a = Tensor(np.zeros(2), requires_grad=True)
    ad.tsum(ad.magnitude(a, Tensor(np.zeros(2)))).backward()
    np.testing.assert_array_equal(a.grad, 0.0)


def test_matmul_broadcast_gradients(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    assert finite_diff_check(weighted(lambda t: t @ Tensor(b)), a) < 1e-5
    assert finite_diff_check(weighted(lambda t: Tensor(a) @ t), b) < 1e-5


def test_reductions_shapes_and_indexing(rng):
    x = rng.normal(size=(3, 4, 5))
    assert finite_diff_check(weighted(lambda t: ad.mean(t, axis=1)), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.tsum(t, axis=(0, 2), keepdims=True)), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.transpose(t, (2, 0, 1)).reshape(5, 12)), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: t[:, 1:3, ::2]), x) < 1e-5
    assert finite_diff_check(weighted(lambda t: ad.concat([t, t * 2.0], axis=1)), x) < 1e-5


def test_take_rows_accumulates_repeats():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    ad.tsum(ad.take_rows(table, np.array([0, 2, 0]))).backward()
    np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_sum_has_exact_unit_gradient():
    x = np.random.default_rng(3).normal(size=(5, 7))
    assert finite_diff_check(lambda t: t, x) < 1e-9


def test_reuse_doubles_gradient():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = Tensor(np.array([0.3, 0.7]), requires_grad=True)
    ad.tsum(x * y + x * y).backward()
    np.testing.assert_array_equal(x.grad, 2 * y.data)


def test_detached_branch_gets_no_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    w = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    ad.tsum(x * ad.stop_gradient(w * 2.0)).backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [6.0, 8.0])


def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ad.tsum(x * 2.0)
    loss.backward()
    with pytest.raises(GradientError):
        loss.backward()


def test_parameters_survive_repeated_graphs():
    w = Tensor(np.ones(2), requires_grad=True)
    for _ in range(2):
        w.grad = None
        ad.tsum(w * 3.0).backward()
        np.testing.assert_array_equal(w.grad, [3.0, 3.0])


def test_backward_rejects_nonscalar_and_nonfinite():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientError):
        (x * 2.0).backward()
    with pytest.raises(GradientError), np.errstate(divide="ignore"):
        ad.tsum(ad.log(x - 1.0)).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_straight_through_contract():
    inp = Tensor(np.array([0.1, 0.2]), requires_grad=True)
    q = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    out = ad.straight_through(inp, q)
    np.testing.assert_array_equal(out.data, q.data)
    ad.tsum(out * Tensor(np.array([3.0, 5.0]))).backward()
    np.testing.assert_array_equal(inp.grad, [3.0, 5.0])
    assert q.grad is None


def test_finite_diff_check_reports_coordinate():
    with pytest.raises(GradientError, match="coordinate 1"):
        finite_diff_check(ad.log, np.array([1.0, 1e-4, 2.0]), step=1e-3, coords=[1])


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_mul_gradients_sum_over_broadcast_axis(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ad.tsum(ta * tb + tb).backward()
    np.testing.assert_allclose(tb.grad, a.sum(axis=0) + 3, atol=1e-12)
    np.testing.assert_allclose(ta.grad, np.broadcast_to(b, (3, 4)), atol=0)
