import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from spikelab import kernels


def test_matmul_matches_float64_product():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7)).astype(np.float32)
    b = rng.standard_normal((7, 3)).astype(np.float32)
    ref = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    np.testing.assert_array_equal(kernels.matmul(a, b), ref)


def test_matmul_batched_and_shape_errors():
    a = np.ones((2, 3, 4), np.float32)
    b = np.ones((2, 4, 5), np.float32)
    assert kernels.matmul(a, b).shape == (2, 3, 5)
    with pytest.raises(ValueError):
        kernels.matmul(np.ones((3, 4)), np.ones((5, 2)))
    with pytest.raises(ValueError):
        kernels.matmul(np.ones((2, 3, 4)), np.ones((3, 4, 5)))


def test_matmul_rejects_overflow():
    big = np.full((1, 2), 3e38, np.float32)
    with pytest.raises(FloatingPointError):
        kernels.matmul(big, np.full((2, 1), 10, np.float32))


def test_rmsnorm_hand_computed():
    x = np.array([[3.0, 4.0]], np.float32)
    out = kernels.rmsnorm(x, np.ones(2), eps=0.0)
    # rms = sqrt((9 + 16) / 2)
    np.testing.assert_allclose(out, [[3 / np.sqrt(12.5), 4 / np.sqrt(12.5)]], rtol=1e-6)


def test_rmsnorm_zero_row_without_eps():
    out = kernels.rmsnorm(np.zeros((2, 4), np.float32), np.ones(4), eps=0.0)
    assert np.all(out == 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0))
def test_rmsnorm_scale_invariant(k):
    x = np.random.default_rng(3).standard_normal((4, 8)).astype(np.float32)
    np.testing.assert_allclose(kernels.rmsnorm(k * x, np.ones(8), 0.0), kernels.rmsnorm(x, np.ones(8), 0.0),
                               rtol=1e-5, atol=1e-6)


def test_silu_and_gelu_values():
    x = np.array([-2.0, 0.0, 1.0, 3.0])
    np.testing.assert_allclose(kernels.silu(x), x / (1 + np.exp(-x)), rtol=1e-12)
    np.testing.assert_allclose(kernels.gelu(x), 0.5 * x * (1 + erf(x / np.sqrt(2))), rtol=1e-12)
    assert kernels.gelu(np.array([1.0]))[0] == pytest.approx(0.8413447460685429, rel=1e-12)
    with pytest.raises(ValueError):
        kernels.activation(x, "relu")


def test_causal_softmax_masks_future():
    p = kernels.causal_softmax_rows(np.zeros((3, 3)))
    np.testing.assert_allclose(p, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], rtol=1e-6)
    assert p[0, 1] == 0.0 and p[0, 2] == 0.0


def test_causal_softmax_offset_and_batch():
    s = np.random.default_rng(1).standard_normal((2, 2, 5))
    p = kernels.causal_softmax_rows(s, offset=3)
    assert p.shape == (2, 2, 5)
    assert np.all(p[:, 0, 4] == 0) and np.all(p[:, 1, :] > 0)
    np.testing.assert_allclose(p.sum(-1), 1, rtol=1e-6)


def test_causal_softmax_rejects_negative_offset():
    with pytest.raises(ValueError):
        kernels.causal_softmax_rows(np.zeros((3, 3)), offset=-1)


def test_rope_position_zero_is_identity_and_norm_preserved():
    x = np.random.default_rng(2).standard_normal((4, 2, 8)).astype(np.float32)
    out = kernels.rope_apply(x, np.arange(4))
    np.testing.assert_allclose(out[0], x[0], rtol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-5)


def test_rope_rotates_pairs_by_expected_angle():
    x = np.zeros((1, 1, 4), np.float32)
    x[0, 0, 2] = 1.0
    out = kernels.rope_apply(x, np.array([3]), theta=100.0)
    ang = 3 * 100.0 ** (-2 / 4)
    np.testing.assert_allclose(out[0, 0, 2:], [np.cos(ang), np.sin(ang)], rtol=1e-6)


def test_rope_relative_property():
    rng = np.random.default_rng(4)
    q = rng.standard_normal((1, 1, 8))
    k = rng.standard_normal((1, 1, 8))
    d1 = (kernels.rope_apply(q, [5]) * kernels.rope_apply(k, [2])).sum()
    d2 = (kernels.rope_apply(q, [13]) * kernels.rope_apply(k, [10])).sum()
    assert d1 == pytest.approx(d2, rel=1e-5)


def test_rope_odd_dim_rejected():
    with pytest.raises(ValueError):
        kernels.rope_frequencies(7, 10000.0)
