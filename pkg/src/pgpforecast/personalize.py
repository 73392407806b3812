"""Subject-level adaptation of the population GP.

pGP conditions the population posterior on the target subject's own past
rows (the population posterior acts as the prior), tGP is a plain GP on those
rows alone with the population hyperparameters, and the joint model averages
the two Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .gp import (
    GaussianForecast,
    PopulationModel,
    TargetScaler,
    _check_input,
    sgp_standardized,
    to_forecast,
)
from .kernels import Hyperparameters, factor_spd, kernel_matrix, solve


@dataclass
class TargetHistory:
    """Full-window rows of one target subject available at anchor visit ``current_visit``."""

    inputs: np.ndarray
    targets: np.ndarray
    subject_id: str = ""
    current_visit: int = 0
    anchors: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs.reshape(0 if self.inputs.size == 0 else 1, -1)
        if self.targets.ndim == 1:
            self.targets = self.targets.reshape(self.inputs.shape[0], -1)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("history inputs and targets have different row counts")
        if self.anchors and any(b <= a for a, b in zip(self.anchors, self.anchors[1:])):
            raise ValueError("history anchors must be strictly increasing")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def empty(self) -> bool:
        return len(self) == 0


@dataclass(frozen=True)
class AdaptedPrior:
    """Population posterior evaluated jointly at the history inputs and the test input."""

    mu_cond: np.ndarray   # (m, H)
    v_cond: np.ndarray    # (m, m)
    cross: np.ndarray     # (m,)


def conditional_prior(m: PopulationModel, hist: TargetHistory, u_star) -> AdaptedPrior:
    if hist.empty:
        raise ValueError("conditional prior needs at least one history row")
    u = _check_input(m, u_star)
    Xp = hist.inputs
    h = m.hyper
    K_sp = kernel_matrix(m.train_inputs, Xp, h)
    k_s_star = kernel_matrix(m.train_inputs, u, h)[:, 0]
    L = m.factor.lower
    W = solve_triangular(L, K_sp, lower=True, check_finite=False)
    w = solve_triangular(L, k_s_star, lower=True, check_finite=False)
    mu_cond = K_sp.T @ m.alpha
    v_cond = kernel_matrix(Xp, Xp, h) - W.T @ W
    v_cond = 0.5 * (v_cond + v_cond.T)
    cross = kernel_matrix(Xp, u, h)[:, 0] - W.T @ w
    return AdaptedPrior(mu_cond=mu_cond, v_cond=v_cond, cross=cross)


def pgp_standardized(m: PopulationModel, hist: TargetHistory, u_star) -> tuple[np.ndarray, float]:
    mu_s, var_s = sgp_standardized(m, u_star)
    if hist.empty:
        return mu_s, var_s
    prior = conditional_prior(m, hist, u_star)
    f = factor_spd(prior.v_cond, m.hyper.noise_variance, name="adapted prior covariance")
    means = mu_s + prior.cross @ solve(f, hist.targets - prior.mu_cond)
    v = solve_triangular(f.lower, prior.cross, lower=True, check_finite=False)
    return means, max(var_s - float(v @ v), 0.0)


def predict_pgp(m: PopulationModel, hist: TargetHistory, u_star) -> GaussianForecast:
    """Personalized forecast; falls back to the population forecast on empty history."""
    means, var = pgp_standardized(m, hist, u_star)
    return to_forecast(means, var, m.scaler, fallback=hist.empty)


def tgp_standardized(h: Hyperparameters, hist: TargetHistory, u_star) -> tuple[np.ndarray, float]:
    if hist.empty:
        raise ValueError("target-only GP needs at least one history row")
    u = np.asarray(u_star, dtype=float).ravel()
    if u.shape[0] != hist.inputs.shape[1]:
        raise ValueError(f"test input has dimension {u.shape[0]}, history has {hist.inputs.shape[1]}")
    K = kernel_matrix(hist.inputs, hist.inputs, h)
    f = factor_spd(K, h.noise_variance, name="target history kernel")
    k_star = kernel_matrix(hist.inputs, u, h)[:, 0]
    means = k_star @ solve(f, hist.targets)
    v = solve_triangular(f.lower, k_star, lower=True, check_finite=False)
    return means, max(h.signal_variance - float(v @ v), 0.0)


def predict_tgp(h: Hyperparameters, hist: TargetHistory, u_star,
                scaler: TargetScaler) -> GaussianForecast:
    """GP on the target subject's history only, reusing population hyperparameters."""
    means, var = tgp_standardized(h, hist, u_star)
    return to_forecast(means, var, scaler)


def predict_joint(p: GaussianForecast, t: GaussianForecast | None) -> GaussianForecast:
    """Average of the pGP and tGP Gaussians: N((mp + mt)/2, (Vp + Vt)/4)."""
    if t is None:
        return p
    if len(p.means) != len(t.means):
        raise ValueError(f"horizon mismatch: {len(p.means)} vs {len(t.means)}")
    return GaussianForecast(means=0.5 * (p.means + t.means),
                            variance=0.25 * (p.variance + t.variance))
