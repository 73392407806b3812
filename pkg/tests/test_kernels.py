import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pgpforecast.kernels import (
    Hyperparameters,
    NumericalDegeneracyError,
    factor_spd,
    jitter_ladder,
    kernel_matrix,
    rbf,
    solve,
)

finite = st.floats(-20, 20, allow_nan=False)
positive = st.floats(1e-3, 1e3, allow_nan=False)


def H(s=1.0, l=1.0, n=0.1):
    return Hyperparameters.from_values(s, l, n)


def test_rbf_zero_distance():
    assert rbf([1.5, -2], [1.5, -2], H(s=2.0)) == 2.0


def test_rbf_unit_exponent():
    ell = 1.7
    x = math.sqrt(2) * ell
    assert rbf([0.0], [x], H(l=ell)) == pytest.approx(math.exp(-1), rel=1e-12)


def test_rbf_3_4_5():
    # |a-b|^2 = 25, 2 l^2 = 50
    assert rbf([0, 0], [3, 4], H(l=5.0)) == pytest.approx(0.6065306597126334, rel=1e-12)


def test_rbf_dimension_mismatch():
    with pytest.raises(ValueError):
        rbf([0, 0], [0], H())


@given(a=arrays(float, 3, elements=finite), b=arrays(float, 3, elements=finite),
       s=positive, l=positive)
def test_rbf_symmetric_and_bounded(a, b, s, l):
    h = H(s, l)
    assert rbf(a, b, h) == rbf(b, a, h)
    assert rbf(a, a, h) == h.signal_variance
    assert 0 <= rbf(a, b, h) <= h.signal_variance


@given(s=positive, l=positive, n=positive)
def test_hyper_log_round_trip(s, l, n):
    h = Hyperparameters.from_values(s, l, n)
    assert h.signal_variance == pytest.approx(s, rel=1e-14)
    assert h.lengthscale == pytest.approx(l, rel=1e-14)
    assert h.noise_variance == pytest.approx(n, rel=1e-14)
    assert Hyperparameters.from_log(h.to_log()) == h
    assert Hyperparameters.from_dict(h.to_dict()) == h


def test_hyper_rejects_nonpositive():
    with pytest.raises(ValueError):
        Hyperparameters.from_values(1.0, 0.0, 0.1)


def test_kernel_matrix_shapes_and_entries(rng):
    h = H(1.3, 0.8)
    assert kernel_matrix([[0.2, 0.1]], [[0.2, 0.1]], h).tolist() == [[1.3]]
    assert np.all(kernel_matrix([[1, 2], [1, 2]], [[1, 2], [1, 2]], h) == 1.3)
    A = rng.normal(size=(4, 3))
    B = rng.normal(size=(2, 3))
    K = kernel_matrix(A, B, h)
    oracle = np.array([[rbf(a, b, h) for b in B] for a in A])
    np.testing.assert_allclose(K, oracle, rtol=1e-13)
    KA = kernel_matrix(A, A, h)
    assert np.array_equal(KA, KA.T)
    assert np.all(np.diag(KA) == 1.3)
    with pytest.raises(ValueError):
        kernel_matrix(A, rng.normal(size=(2, 2)), h)


def test_factor_identity():
    f = factor_spd(np.eye(3), 0.0)
    assert f.jitter_used == 0.0
    np.testing.assert_array_equal(f.lower, np.eye(3))


def test_factor_singular_uses_smallest_sufficient_jitter():
    K = np.ones((2, 2))
    f = factor_spd(K, 0.0)
    # oracle: first ladder value for which the jittered matrix has positive eigenvalues
    # and a Cholesky factor exists
    expected = None
    for j in jitter_ladder(1.0):
        if np.linalg.eigvalsh(K + j * np.eye(2)).min() > 0:
            try:
                np.linalg.cholesky(K + j * np.eye(2))
            except np.linalg.LinAlgError:
                continue
            expected = j
            break
    assert f.jitter_used == expected == pytest.approx(1e-10)


def test_jitter_ladder_values():
    lad = jitter_ladder(2.0)
    assert lad[0] == pytest.approx(2e-10)
    assert lad[-1] == pytest.approx(2e-2)
    assert len(lad) == 9


def test_factor_reconstructs(rng):
    X = rng.normal(size=(5, 2))
    K = kernel_matrix(X, X, H())
    f = factor_spd(K, 0.01)
    C = K + 0.01 * np.eye(5)
    err = np.linalg.norm(f.lower @ f.lower.T - C) / np.linalg.norm(C)
    assert err < 1e-8
    assert f.jitter_used == 0.0


def test_factor_failure_raises():
    K = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NumericalDegeneracyError, match="my matrix"):
        factor_spd(K, 0.0, name="my matrix")


def test_factor_rejects_asymmetric():
    with pytest.raises(ValueError):
        factor_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_solve_identity_and_zero(rng):
    f = factor_spd(np.eye(3))
    B = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(solve(f, B), B)
    np.testing.assert_array_equal(solve(f, np.zeros((3, 2))), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        solve(f, np.zeros((4, 1)))


def test_solve_multiply_back(rng):
    A = rng.normal(size=(4, 4))
    S = A @ A.T + 4 * np.eye(4)
    X = solve(factor_spd(S), S)
    np.testing.assert_allclose(X, np.eye(4), atol=1e-10)


@pytest.mark.parametrize("n", [10, 100, 500])
def test_solve_relative_residual(rng, n):
    X = rng.normal(size=(n, 3))
    K = kernel_matrix(X, X, H(1.0, 1.5))
    f = factor_spd(K, 0.1)
    B = rng.normal(size=(n, 2))
    sol = solve(f, B)
    C = K + 0.1 * np.eye(n)
    assert np.linalg.norm(C @ sol - B) / np.linalg.norm(B) < 1e-8


@given(pts=arrays(float, (6, 2), elements=st.floats(-5, 5)),
       noise=st.floats(1e-6, 1.0))
def test_noise_makes_factor_jitter_free(pts, noise):
    K = kernel_matrix(pts, pts, H(1.0, 1.0))
    assert factor_spd(K, noise).jitter_used == 0.0
