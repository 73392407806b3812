"""Population-level (source) GP for simultaneous multi-horizon forecasting.

The H horizon columns share one RBF kernel and one noise variance, so a single
Cholesky factor serves every column and the predictive variance is common to
all horizons.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .kernels import (
    Hyperparameters,
    NumericalDegeneracyError,
    SpdFactor,
    factor_spd,
    inverse,
    kernel_matrix,
    solve,
    squared_distances,
)

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


class FittingError(RuntimeError):
    """All optimizer restarts failed."""


@dataclass(frozen=True)
class TargetScaler:
    """Affine map between standardized and raw score units."""

    mean: float = 0.0
    std: float = 1.0

    def to_raw_mean(self, m):
        return np.asarray(m) * self.std + self.mean

    def to_raw_variance(self, v):
        return v * self.std ** 2

    def to_std(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.std


IDENTITY_SCALER = TargetScaler()


@dataclass
class TrainingSet:
    """Supervised rows u_t -> (y_{t+1}, ..., y_{t+H}), standardized."""

    inputs: np.ndarray
    targets: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} input rows but {self.targets.shape[0]} target rows")
        if self.targets.shape[1] < 1:
            raise ValueError("need at least one horizon")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("training set contains non-finite values")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @cached_property
    def sq_dists(self) -> np.ndarray:
        # reused by every likelihood evaluation during fitting
        return squared_distances(self.inputs, self.inputs)

    @property
    def horizon_count(self) -> int:
        return self.targets.shape[1]


@dataclass(frozen=True)
class GaussianForecast:
    """Per-horizon means with one shared variance, in raw score units."""

    means: np.ndarray
    variance: float
    fallback: bool = False

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError(f"negative predictive variance {self.variance}")

    @property
    def horizon_months(self) -> list[int]:
        return [6 * (h + 1) for h in range(len(self.means))]

    def ci(self, z: float = 0.67) -> tuple[np.ndarray, np.ndarray]:
        half = z * np.sqrt(self.variance)
        return self.means - half, self.means + half


@dataclass(frozen=True)
class PopulationModel:
    hyper: Hyperparameters
    train_inputs: np.ndarray
    train_targets: np.ndarray
    factor: SpdFactor
    alpha: np.ndarray
    scaler: TargetScaler = IDENTITY_SCALER

    @property
    def horizon_count(self) -> int:
        return self.alpha.shape[1]

    @property
    def input_dim(self) -> int:
        return self.train_inputs.shape[1]


@dataclass
class OptimizerConfig:
    restarts: int = 5
    seed: int = 0
    max_iter: int = 200
    gtol: float = 1e-5
    init_low: float = 0.1
    init_high: float = 10.0
    # box on log-parameters, keeps L-BFGS away from overflow
    log_bounds: tuple[float, float] = (-12.0, 12.0)


def nlml(ts: TrainingSet, h: Hyperparameters, with_grad: bool = True):
    """Negative log marginal likelihood summed over the target columns.

    Returns ``(value, gradient)`` where the gradient is taken w.r.t.
    ``(log signal_variance, log lengthscale, log noise_variance)``.
    """
    X, Y = ts.inputs, ts.targets
    n, H = Y.shape
    D = ts.sq_dists
    K = h.signal_variance * np.exp(-0.5 * D / h.lengthscale ** 2)
    f = factor_spd(K, h.noise_variance, name="training kernel")
    A = solve(f, Y)
    value = 0.5 * float(np.sum(Y * A)) + 0.5 * H * f.logdet() + 0.5 * H * n * LOG_2PI
    if not with_grad:
        return value, None
    # dNLML/dθ = ½ tr((H C^-1 - A Aᵀ) dC/dθ)
    W = H * inverse(f) - A @ A.T
    grad = np.array([
        0.5 * float(np.sum(W * K)),
        0.5 * float(np.sum(W * (K * D))) / h.lengthscale ** 2,
        0.5 * h.noise_variance * float(np.trace(W)),
    ])
    return value, grad


def build_population_model(ts: TrainingSet, h: Hyperparameters,
                           scaler: TargetScaler = IDENTITY_SCALER) -> PopulationModel:
    K = kernel_matrix(ts.inputs, ts.inputs, h)
    f = factor_spd(K, h.noise_variance, name="training kernel")
    alpha = solve(f, ts.targets)
    return PopulationModel(hyper=h, train_inputs=ts.inputs.copy(),
                           train_targets=ts.targets.copy(), factor=f, alpha=alpha,
                           scaler=scaler)


def initial_points(opt: OptimizerConfig) -> np.ndarray:
    rng = np.random.default_rng(opt.seed)
    lo, hi = np.log(opt.init_low), np.log(opt.init_high)
    return rng.uniform(lo, hi, size=(opt.restarts, 3))


def optimize_hyperparameters(ts: TrainingSet, opt: OptimizerConfig | None = None):
    """Multi-start L-BFGS on the log-parameters; returns (best Hyperparameters, best NLML)."""
    opt = opt or OptimizerConfig()

    def objective(theta):
        try:
            v, g = nlml(ts, Hyperparameters.from_log(theta))
        except NumericalDegeneracyError:
            return np.inf, np.zeros(3)
        return v, g

    best = None
    for i, theta0 in enumerate(initial_points(opt)):
        try:
            res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                           bounds=[opt.log_bounds] * 3,
                           options={"maxiter": opt.max_iter, "gtol": opt.gtol})
        except (NumericalDegeneracyError, ValueError) as exc:
            log.warning("restart %d failed: %s", i, exc)
            continue
        if not np.isfinite(res.fun):
            log.warning("restart %d ended at non-finite NLML", i)
            continue
        log.debug("restart %d: nlml=%.6g nit=%d %s", i, res.fun, res.nit, res.message)
        if best is None or res.fun < best[1]:
            best = (res.x, float(res.fun))
    if best is None:
        raise FittingError(f"all {opt.restarts} restarts failed to factor the training kernel")
    return Hyperparameters.from_log(best[0]), best[1]


def fit_population(ts: TrainingSet, opt: OptimizerConfig | None = None,
                   scaler: TargetScaler = IDENTITY_SCALER) -> PopulationModel:
    """Fit hyperparameters by NLML minimization and precompute the solve products."""
    if ts.n < 2:
        raise ValueError("need at least two training rows")
    h, _ = optimize_hyperparameters(ts, opt)
    return build_population_model(ts, h, scaler)


def _check_input(m: PopulationModel, u_star) -> np.ndarray:
    u = np.asarray(u_star, dtype=float).ravel()
    if u.shape[0] != m.input_dim:
        raise ValueError(f"test input has dimension {u.shape[0]}, model expects {m.input_dim}")
    return u


def sgp_standardized(m: PopulationModel, u_star) -> tuple[np.ndarray, float]:
    """Population predictive mean (per horizon) and variance in standardized units."""
    u = _check_input(m, u_star)
    k_star = kernel_matrix(m.train_inputs, u, m.hyper)[:, 0]
    means = k_star @ m.alpha
    v = solve_triangular(m.factor.lower, k_star, lower=True, check_finite=False)
    var = m.hyper.signal_variance - float(v @ v)
    return means, max(var, 0.0)


def to_forecast(means, var: float, scaler: TargetScaler, fallback: bool = False) -> GaussianForecast:
    return GaussianForecast(means=np.asarray(scaler.to_raw_mean(means), dtype=float),
                            variance=float(scaler.to_raw_variance(var)), fallback=fallback)


def predict_sgp(m: PopulationModel, u_star) -> GaussianForecast:
    means, var = sgp_standardized(m, u_star)
    return to_forecast(means, var, m.scaler)
