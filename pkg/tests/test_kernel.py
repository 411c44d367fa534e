import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dualctr import kernel as kn

finite = st.floats(-5, 5, allow_nan=False)


def test_rbf_values():
    p = kn.RbfParams.from_values(1.0, 1.0)
    assert kn.rbf([0.0, 0.0], [0.0, 0.0], p) == 1.0
    assert kn.rbf([1.0, 0.0], [0.0, 0.0], p) == pytest.approx(np.exp(-0.5), abs=1e-12)
    assert kn.rbf([1.0], [0.0], p) == pytest.approx(0.60653, abs=1e-5)
    q = kn.RbfParams.from_values(2.0, 0.5)
    assert kn.rbf([0.5], [0.0], q) == pytest.approx(4.0 * np.exp(-0.5), abs=1e-12)


def test_params_positive():
    with pytest.raises(ValueError):
        kn.RbfParams.from_values(0.0, 1.0)
    with pytest.raises(ValueError):
        kn.RbfParams.from_values(1.0, -1.0)


def test_dimension_mismatch():
    p = kn.RbfParams()
    with pytest.raises(kn.DimensionMismatch):
        kn.rbf([0.0, 1.0], [0.0], p)
    with pytest.raises(kn.DimensionMismatch):
        kn.kernel_matrix(np.zeros((2, 3)), np.zeros((2, 2)), p)


def test_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    p = kn.RbfParams.from_values(0.7, 1.3)
    K = kn.kernel_matrix(A, B, p)
    for i in range(4):
        for j in range(5):
            assert K[i, j] == pytest.approx(kn.rbf(A[i], B[j], p), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 2), elements=finite), st.floats(0.2, 3), st.floats(0.2, 3))
def test_gram_symmetric_psd_bounded(H, a, l):
    p = kn.RbfParams.from_values(a, l)
    K = kn.kernel_matrix(H, H, p)
    np.testing.assert_allclose(K, K.T, atol=0)
    np.testing.assert_allclose(np.diag(K), a * a, rtol=1e-12)
    assert np.all(K <= a * a * (1 + 1e-12)) and np.all(K >= 0)
    assert np.linalg.eigvalsh(K).min() > -1e-9 * a * a


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite),
       st.floats(0.3, 2), st.floats(0.3, 2))
def test_rbf_grads_finite_differences(h1, h2, a, l):
    p = kn.RbfParams.from_values(a, l)
    g1, g2, ga, gl = kn.rbf_grads(h1, h2, p)
    eps = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        num = (kn.rbf(h1 + e, h2, p) - kn.rbf(h1 - e, h2, p)) / (2 * eps)
        assert g1[i] == pytest.approx(num, abs=1e-6)
        num2 = (kn.rbf(h1, h2 + e, p) - kn.rbf(h1, h2 - e, p)) / (2 * eps)
        assert g2[i] == pytest.approx(num2, abs=1e-6)
    pa = lambda d: kn.rbf(h1, h2, kn.RbfParams(p.log_a + d, p.log_l))
    pl = lambda d: kn.rbf(h1, h2, kn.RbfParams(p.log_a, p.log_l + d))
    assert ga == pytest.approx((pa(eps) - pa(-eps)) / (2 * eps), abs=1e-6)
    assert gl == pytest.approx((pl(eps) - pl(-eps)) / (2 * eps), abs=1e-6)


def test_kernel_matrix_backward_finite_differences():
    rng = np.random.default_rng(2)
    H1, H2 = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    G = rng.normal(size=(4, 3))
    p = kn.RbfParams.from_values(0.8, 1.1)
    dH1, dH2, da, dl = kn.kernel_matrix_backward(G, kn.kernel_matrix(H1, H2, p), H1, H2, p)
    f = lambda A, B, q: float((G * kn.kernel_matrix(A, B, q)).sum())
    eps = 1e-6
    for X, dX, which in ((H1, dH1, 0), (H2, dH2, 1)):
        num = np.zeros_like(X)
        for idx in np.ndindex(X.shape):
            Xp, Xm = X.copy(), X.copy()
            Xp[idx] += eps
            Xm[idx] -= eps
            args_p = (Xp, H2) if which == 0 else (H1, Xp)
            args_m = (Xm, H2) if which == 0 else (H1, Xm)
            num[idx] = (f(*args_p, p) - f(*args_m, p)) / (2 * eps)
        np.testing.assert_allclose(dX, num, rtol=1e-6, atol=1e-8)
    num_a = (f(H1, H2, kn.RbfParams(p.log_a + eps, p.log_l)) - f(H1, H2, kn.RbfParams(p.log_a - eps, p.log_l))) / (2 * eps)
    num_l = (f(H1, H2, kn.RbfParams(p.log_a, p.log_l + eps)) - f(H1, H2, kn.RbfParams(p.log_a, p.log_l - eps))) / (2 * eps)
    assert da == pytest.approx(num_a, rel=1e-6)
    assert dl == pytest.approx(num_l, rel=1e-6)
