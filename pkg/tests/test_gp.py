import math

import numpy as np
import pytest

from conftest import random_hyper
from pgpforecast.gp import (
    OptimizerConfig,
    TargetScaler,
    TrainingSet,
    build_population_model,
    fit_population,
    initial_points,
    nlml,
    optimize_hyperparameters,
    predict_sgp,
    sgp_standardized,
)
from pgpforecast.kernels import Hyperparameters, kernel_matrix


def sample_gp(rng, n, d, h):
    X = rng.uniform(-5, 5, size=(n, d))
    K = kernel_matrix(X, X, h) + h.noise_variance * np.eye(n)
    y = np.linalg.cholesky(K) @ rng.normal(size=n)
    return X, y


def fd_gradient(ts, theta, step=1e-5):
    g = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = step
        hi, _ = nlml(ts, Hyperparameters.from_log(theta + e), with_grad=False)
        lo, _ = nlml(ts, Hyperparameters.from_log(theta - e), with_grad=False)
        g[i] = (hi - lo) / (2 * step)
    return g


def test_nlml_single_point_closed_form():
    h = Hyperparameters.from_values(1.7, 0.9, 0.3)
    y0 = 1.25
    ts = TrainingSet([[0.4, -1.0]], [[y0]])
    v, _ = nlml(ts, h)
    s = 1.7 + 0.3
    assert v == pytest.approx(0.5 * math.log(2 * math.pi * s) + y0 ** 2 / (2 * s), rel=1e-12)


def test_nlml_column_additivity(rng):
    X = rng.normal(size=(7, 3))
    y = rng.normal(size=7)
    h = random_hyper(rng, 3)
    one, g1 = nlml(TrainingSet(X, y[:, None]), h)
    two, g2 = nlml(TrainingSet(X, np.column_stack([y, y])), h)
    assert two == pytest.approx(2 * one, rel=1e-12)
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_nlml_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, d, Hh = rng.integers(2, 51), rng.integers(1, 6), rng.integers(1, 5)
    ts = TrainingSet(rng.normal(size=(n, d)), rng.normal(size=(n, Hh)))
    theta = random_hyper(rng, d).to_log()
    _, g = nlml(ts, Hyperparameters.from_log(theta))
    fd = fd_gradient(ts, theta)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)


def test_initial_points_in_range_and_seeded():
    opt = OptimizerConfig(restarts=5, seed=3)
    p = initial_points(opt)
    assert p.shape == (5, 3)
    assert np.all(p >= math.log(0.1)) and np.all(p <= math.log(10))
    np.testing.assert_array_equal(p, initial_points(OptimizerConfig(restarts=5, seed=3)))


def test_fit_decreases_nlml_on_constant_targets(rng):
    X = rng.normal(size=(20, 2))
    ts = TrainingSet(X, np.zeros((20, 2)))
    opt = OptimizerConfig(restarts=3, seed=1)
    _, best = optimize_hyperparameters(ts, opt)
    for theta0 in initial_points(opt):
        v0, _ = nlml(ts, Hyperparameters.from_log(theta0))
        assert best <= v0


def test_fit_is_deterministic(rng):
    X = rng.normal(size=(30, 2))
    y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=30)
    ts = TrainingSet(X, y)
    a = fit_population(ts, OptimizerConfig(seed=9)).hyper
    b = fit_population(ts, OptimizerConfig(seed=9)).hyper
    assert a == b


def test_fit_requires_two_rows():
    with pytest.raises(ValueError):
        fit_population(TrainingSet([[0.0]], [[1.0]]))


@pytest.mark.slow
def test_hyperparameter_recovery():
    true = Hyperparameters.from_values(1.0, 2.0, 0.1)
    rng = np.random.default_rng(0)
    X, y = sample_gp(rng, 300, 3, true)
    ts = TrainingSet(X, y)
    h, best = optimize_hyperparameters(ts, OptimizerConfig(seed=0))
    # the optimum must beat the generating parameters and land in their neighbourhood
    assert best <= nlml(ts, true, with_grad=False)[0] + 1e-8
    assert np.all(np.abs(h.to_log() - true.to_log()) <= 0.5)


def test_alpha_solves_system(rng):
    X = rng.normal(size=(15, 3))
    Y = rng.normal(size=(15, 4))
    h = random_hyper(rng, 3)
    m = build_population_model(TrainingSet(X, Y), h)
    C = kernel_matrix(X, X, h) + h.noise_variance * np.eye(15)
    assert np.linalg.norm(C @ m.alpha - Y) / np.linalg.norm(Y) < 1e-8


def test_noiseless_interpolation(rng):
    X = rng.normal(size=(6, 2))
    Y = rng.normal(size=(6, 4))
    h = Hyperparameters.from_values(1.0, 1.0, 1e-10)
    m = build_population_model(TrainingSet(X, Y), h)
    f = predict_sgp(m, X[2])
    np.testing.assert_allclose(f.means, Y[2], atol=1e-6)
    assert f.variance <= 1e-6


def test_prior_reversion_far_away(rng):
    X = rng.normal(size=(6, 2))
    h = Hyperparameters.from_values(1.4, 0.5, 0.1)
    m = build_population_model(TrainingSet(X, rng.normal(size=(6, 4))), h)
    means, var = sgp_standardized(m, [100.0, 100.0])
    assert np.max(np.abs(means)) <= 1e-8
    assert var == pytest.approx(1.4, abs=1e-8)


def test_single_point_shrinkage():
    h = Hyperparameters.from_values(2.0, 1.0, 0.5)
    m = build_population_model(TrainingSet([[0.3, 0.3]], [[1.5, -1.0]]), h)
    means, var = sgp_standardized(m, [0.3, 0.3])
    np.testing.assert_allclose(means, 2.0 / 2.5 * np.array([1.5, -1.0]), rtol=1e-12)
    assert var == pytest.approx(2.0 - 4.0 / 2.5, rel=1e-12)


def test_destandardization(rng):
    X = rng.normal(size=(8, 2))
    Y = rng.normal(size=(8, 4))
    h = random_hyper(rng, 2)
    ts = TrainingSet(X, Y)
    scaler = TargetScaler(mean=20.0, std=3.0)
    raw = predict_sgp(build_population_model(ts, h, scaler), X[0])
    std = predict_sgp(build_population_model(ts, h), X[0])
    np.testing.assert_allclose(raw.means, std.means * 3 + 20, rtol=1e-12)
    assert raw.variance == pytest.approx(9 * std.variance, rel=1e-12)
    assert raw.horizon_months == [6, 12, 18, 24]


def test_variance_non_increasing_with_more_data(rng):
    X = rng.normal(size=(20, 3))
    Y = rng.normal(size=(20, 2))
    h = random_hyper(rng, 3)
    u = rng.normal(size=3)
    prev = np.inf
    for n in range(1, 21):
        _, v = sgp_standardized(build_population_model(TrainingSet(X[:n], Y[:n]), h), u)
        assert v <= prev + 1e-8
        assert 0 <= v <= h.signal_variance
        prev = v


def test_mean_linear_in_targets(rng):
    X = rng.normal(size=(10, 2))
    Y = rng.normal(size=(10, 4))
    h = random_hyper(rng, 2)
    u = rng.normal(size=2)
    a, _ = sgp_standardized(build_population_model(TrainingSet(X, Y), h), u)
    b, _ = sgp_standardized(build_population_model(TrainingSet(X, 3.5 * Y), h), u)
    np.testing.assert_allclose(b, 3.5 * a, atol=1e-10)


def test_dimension_mismatch(rng):
    m = build_population_model(TrainingSet(rng.normal(size=(4, 2)), rng.normal(size=4)),
                               Hyperparameters.from_values(1, 1, 0.1))
    with pytest.raises(ValueError):
        predict_sgp(m, [0.0, 0.0, 0.0])


def test_training_set_rejects_nonfinite():
    with pytest.raises(ValueError):
        TrainingSet([[0.0], [np.nan]], [[1.0], [2.0]])
