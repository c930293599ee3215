import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dualcodec import autodiff as ad
from dualcodec.autodiff import Tensor
from dualcodec.quantizer import (ProjectedCodebook, TokenMatrix, init_from_data, nearest_codes, quantization_loss,
                                 reinit_dead_codes, rvq_forward, sample_dropout_q, vq_encode)


def brute_force_argmin(proj, codewords):
    """Explicit normalized-distance search, lowest index on ties."""
    out = []
    for p in proj:
        pn = p / np.linalg.norm(p) if np.linalg.norm(p) > 0 else p
        best, best_d = 0, np.inf
        for k, e in enumerate(codewords):
            en = e / np.linalg.norm(e) if np.linalg.norm(e) > 0 else e
            d = np.sum((pn - en) ** 2) if np.linalg.norm(p) > 0 else np.sum((p - e) ** 2)
            if d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def make_cb(rng, k=16, h=6, d=3):
    return ProjectedCodebook(k, h, d, rng)


def test_vq_matches_brute_force(rng):
    for _ in range(50):
        cb = make_cb(rng, int(rng.integers(2, 65)))
        z = rng.normal(size=(2, 6, 5))
        res = vq_encode(Tensor(z), cb)
        proj = (cb.w_in.data @ z).transpose(0, 2, 1).reshape(-1, 3)
        np.testing.assert_array_equal(res.indices.reshape(-1), brute_force_argmin(proj, cb.codewords.data))


def test_tie_break_lowest_index():
    codewords = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [2.0, 0.0]])
    idx, _ = nearest_codes(np.array([[0.0, 3.0], [5.0, 0.0]]), codewords)
    np.testing.assert_array_equal(idx, [1, 0])


def test_zero_norm_projection_is_flagged_and_deterministic():
    codewords = np.array([[3.0, 0.0], [0.1, 0.1], [0.0, -2.0]])
    idx, zero = nearest_codes(np.zeros((2, 2)), codewords)
    np.testing.assert_array_equal(zero, [True, True])
    np.testing.assert_array_equal(idx, [1, 1])  # smallest raw norm


@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5, allow_nan=False)),
       st.floats(1e-3, 1e3))
def test_argmin_invariant_to_positive_scaling(proj, scale):
    codewords = np.random.default_rng(0).normal(size=(20, 3))
    norms = np.linalg.norm(proj, axis=1)
    proj = proj[norms > 1e-6]
    a, _ = nearest_codes(proj, codewords)
    b, _ = nearest_codes(proj * scale, codewords)
    np.testing.assert_array_equal(a, b)


def test_vq_shapes_and_losses(rng):
    cb = make_cb(rng)
    z = Tensor(rng.normal(size=(2, 6, 7)), requires_grad=True)
    res = vq_encode(z, cb)
    assert res.indices.shape == (2, 7)
    assert res.quantized.shape == (2, 6, 7)
    code = cb.codewords.data[res.indices].transpose(0, 2, 1)
    np.testing.assert_allclose(res.quantized.data, cb.w_out.data @ code, atol=1e-12)
    np.testing.assert_allclose(float(res.codebook_loss.data), np.mean(np.abs(res.projections - code)), atol=1e-12)
    np.testing.assert_allclose(float(res.commitment_loss.data), np.mean((res.projections - code) ** 2), atol=1e-12)
    total = quantization_loss(res, 0.25)
    assert abs(float(total.data) - float(res.codebook_loss.data) - 0.25 * float(res.commitment_loss.data)) < 1e-12
    with pytest.raises(ValueError):
        quantization_loss(res, -1)


def test_vq_channel_mismatch(rng):
    with pytest.raises(ValueError):
        vq_encode(Tensor(rng.normal(size=(1, 5, 3))), make_cb(rng))


def test_straight_through_gradient_equals_quantized_gradient(rng):
    cb = make_cb(rng)
    z = Tensor(rng.normal(size=(1, 6, 4)), requires_grad=True)
    res = vq_encode(z, cb)
    w = rng.normal(size=res.quantized.shape)
    ad.tsum(res.quantized * Tensor(w)).backward()
    # d/dz of W_out st(W_in z) is W_in^T W_out^T g, exactly what a plain linear map would give
    expected = cb.w_in.data.T @ (cb.w_out.data.T @ w)
    np.testing.assert_allclose(z.grad, expected, atol=1e-12)
    assert cb.codewords.grad is None  # reconstruction path does not touch codewords


def test_codewords_receive_gradient_only_from_codebook_loss(rng):
    cb = make_cb(rng)
    z = Tensor(rng.normal(size=(1, 6, 4)), requires_grad=True)
    res = vq_encode(z, cb)
    res.codebook_loss.backward()
    assert cb.codewords.grad is not None and np.any(cb.codewords.grad)
    assert z.grad is None
    cb.codewords.grad = None
    z2 = Tensor(z.data, requires_grad=True)
    res2 = vq_encode(z2, cb)
    res2.commitment_loss.backward()
    assert cb.codewords.grad is None and z2.grad is not None


@given(st.integers(0, 3), st.integers(0, 10_000))
def test_rvq_telescoping(q, seed):
    r = np.random.default_rng(seed)
    layers = [make_cb(r, 8) for _ in range(3)]
    x = r.normal(size=(2, 6, 5)) * r.uniform(0.1, 10)
    out = rvq_forward(Tensor(x), layers, q)
    assert np.max(np.abs(x - (out.quantized_sum.data + out.residual.data))) < 1e-12
    assert len(out.indices) == q


def test_rvq_greedy_matches_layerwise_oracle(rng):
    layers = [make_cb(rng, 12) for _ in range(2)]
    x = rng.normal(size=(1, 6, 6))
    out = rvq_forward(Tensor(x), layers, 2)
    resid = x
    for cb, idx in zip(layers, out.indices):
        proj = (cb.w_in.data @ resid).transpose(0, 2, 1).reshape(-1, 3)
        np.testing.assert_array_equal(idx.reshape(-1), brute_force_argmin(proj, cb.codewords.data))
        resid = resid - cb.w_out.data @ cb.codewords.data[idx].transpose(0, 2, 1)


def test_rvq_q_range(rng):
    with pytest.raises(ValueError):
        rvq_forward(Tensor(np.zeros((1, 6, 2))), [make_cb(rng)], 2)


def test_monotone_capacity_fails_under_normalized_search():
    # With the zero codeword appended the search is still on directions, not on error:
    # a long codeword pointing the right way wins and overshoots.
    cb = ProjectedCodebook(2, 2, 2, np.random.default_rng(0))
    cb.w_in.data[...] = np.eye(2)
    cb.w_out.data[...] = np.eye(2)
    cb.codewords.data[...] = [[10.0, 0.0], [0.0, 0.0]]
    x = np.array([[[1.0], [0.1]]])
    r0 = np.linalg.norm(rvq_forward(Tensor(x), [cb], 0).residual.data)
    r1 = np.linalg.norm(rvq_forward(Tensor(x), [cb], 1).residual.data)
    assert r1 > r0


def test_zero_codeword_chosen_when_no_direction_is_close():
    codewords = np.array([[-1.0, 0.0], [0.0, 0.0]])
    idx, _ = nearest_codes(np.array([[1.0, 0.2]]), codewords)
    assert idx[0] == 1


def test_dropout_q_uniform():
    r = np.random.default_rng(0)
    draws = np.array([sample_dropout_q(r, 3) for _ in range(8000)])
    counts = np.bincount(draws, minlength=4)
    assert set(np.unique(draws)) == {0, 1, 2, 3}
    assert np.all(np.abs(counts / 8000 - 0.25) < 0.02)
    with pytest.raises(ValueError):
        sample_dropout_q(r, 0)


def test_init_from_data_uses_projected_rows(rng):
    cb = make_cb(rng, 4)
    z = rng.normal(size=(1, 6, 50))
    init_from_data(cb, z, rng)
    rows = (cb.w_in.data @ z[0]).T
    d = np.min(np.linalg.norm(cb.codewords.data[:, None] - rows[None], axis=2), axis=1)
    assert cb.initialized and np.all(d < 0.1 * rows.std() * 3)


def test_reinit_dead_codes(rng):
    cb = make_cb(rng, 6)
    before = cb.codewords.data.copy()
    usage = np.array([3, 0, 1, 0, 0, 2])
    n = reinit_dead_codes(cb, usage, rng.normal(size=(20, 3)), rng)
    assert n == 3
    np.testing.assert_array_equal(cb.codewords.data[[0, 2, 5]], before[[0, 2, 5]])
    assert not np.allclose(cb.codewords.data[[1, 3, 4]], before[[1, 3, 4]])
    assert reinit_dead_codes(cb, np.ones(6), rng.normal(size=(4, 3)), rng) == 0


def test_codebook_validation(rng):
    with pytest.raises(ValueError):
        ProjectedCodebook(1, 8, 4, rng)
    with pytest.raises(ValueError):
        ProjectedCodebook(4, 4, 8, rng)
    assert ProjectedCodebook(1024, 8, 4, rng).bits_per_token == 10
    assert ProjectedCodebook(1000, 8, 4, rng).bits_per_token == 10
    with pytest.raises(ValueError):
        make_cb(rng).decode(np.array([[16]]))


def test_token_matrix_validation():
    tm = TokenMatrix(np.array([[1, 2], [3, 0]]), [4, 4], 25.0)
    assert tm.n_layers == 2 and tm.frames == 2
    with pytest.raises(ValueError, match="layer 1, frame 0"):
        TokenMatrix(np.array([[1, 2], [4, 0]]), [4, 4], 25.0)
    with pytest.raises(ValueError):
        TokenMatrix(np.array([[1, 2]]), [4, 4], 25.0)
    assert tm == TokenMatrix(tm.codes.copy(), [4, 4], 25.0)
    assert tm != TokenMatrix(tm.codes.copy(), [4, 8], 25.0)
