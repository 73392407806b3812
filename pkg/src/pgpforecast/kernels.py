"""Isotropic RBF kernel and jitter-protected SPD factorization.

Everything downstream (population fit, personalization, target-only GP)
goes through :func:`factor_spd` and :func:`solve`, so the conditioning policy
lives in exactly one place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, lapack
from scipy.spatial.distance import cdist

# Jitter ladder, relative to the mean diagonal of the matrix being factored.
JITTER_START = 1e-10
JITTER_FACTOR = 10.0
JITTER_MAX = 1e-2


class NumericalDegeneracyError(RuntimeError):
    """Raised when a covariance matrix cannot be factored even with maximal jitter."""


@dataclass(frozen=True)
class Hyperparameters:
    """RBF signal variance, lengthscale and noise variance, stored as logs."""

    log_signal_variance: float
    log_lengthscale: float
    log_noise_variance: float

    @classmethod
    def from_values(cls, signal_variance: float, lengthscale: float,
                    noise_variance: float) -> "Hyperparameters":
        vals = (signal_variance, lengthscale, noise_variance)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValueError(f"hyperparameters must be positive and finite, got {vals}")
        return cls(*(float(np.log(v)) for v in vals))

    @classmethod
    def from_log(cls, log_params) -> "Hyperparameters":
        a, b, c = (float(v) for v in log_params)
        return cls(a, b, c)

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise_variance))

    def to_log(self) -> np.ndarray:
        return np.array([self.log_signal_variance, self.log_lengthscale,
                         self.log_noise_variance])

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscale": self.lengthscale,
            "noise_variance": self.noise_variance,
            "log": self.to_log().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        # the log triple is authoritative; the linear values are informational
        return cls.from_log(d["log"])


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of ``K + noise*I + jitter*I``."""

    lower: np.ndarray
    jitter_used: float
    noise: float

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def _as_rows(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D collection of input rows, got shape {A.shape}")
    return A


def rbf(a, b, h: Hyperparameters) -> float:
    """k(a, b) = s2 * exp(-|a - b|^2 / (2 l^2))."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    d2 = float(np.sum((a - b) ** 2))
    return h.signal_variance * float(np.exp(-0.5 * d2 / h.lengthscale ** 2))


def squared_distances(A, B) -> np.ndarray:
    """Pairwise squared Euclidean distances between the rows of A and B."""
    A = _as_rows(A)
    B = _as_rows(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return cdist(A, B, "sqeuclidean")


def kernel_matrix(A, B, h: Hyperparameters) -> np.ndarray:
    """RBF Gram matrix with entry (i, j) = rbf(A[i], B[j], h)."""
    D = squared_distances(A, B)
    return h.signal_variance * np.exp(-0.5 * D / h.lengthscale ** 2)


def jitter_ladder(scale: float) -> list[float]:
    """Absolute jitter values tried after a failed jitter-free attempt."""
    if not scale > 0:
        scale = 1.0
    out = []
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        out.append(rel * scale)
        rel *= JITTER_FACTOR
    return out


def factor_spd(K, noise: float = 0.0, name: str = "covariance") -> SpdFactor:
    """Cholesky-factor ``K + noise*I``, escalating diagonal jitter only on failure.

    Raises
    ------
    NumericalDegeneracyError
        If the factorization still fails at the largest ladder jitter.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"{name}: expected a square matrix, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise NumericalDegeneracyError(f"{name}: matrix has non-finite entries")
    if np.max(np.abs(K - K.T), initial=0.0) > 1e-10:
        raise ValueError(f"{name}: matrix is not symmetric")
    n = K.shape[0]
    C = K + noise * np.eye(n)
    scale = float(np.mean(np.diag(C))) if n else 1.0
    for jitter in [0.0] + jitter_ladder(scale):
        try:
            L = cholesky(C + jitter * np.eye(n), lower=True, check_finite=False)
        except LinAlgError:
            continue
        return SpdFactor(lower=L, jitter_used=jitter, noise=float(noise))
    raise NumericalDegeneracyError(
        f"{name}: Cholesky failed up to jitter {JITTER_MAX:g} x mean diagonal ({n}x{n})"
    )


def solve(f: SpdFactor, B) -> np.ndarray:
    """Return X with (K + noise*I + jitter*I) X = B."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != f.dimension:
        raise ValueError(f"shape mismatch: factor is {f.dimension}, rhs has {B.shape[0]} rows")
    return cho_solve((f.lower, True), B, check_finite=False)


def inverse(f: SpdFactor) -> np.ndarray:
    # potri works from the factor directly; about a third of the cost of solving against I
    inv, info = lapack.dpotri(f.lower, lower=1)
    if info != 0:
        raise NumericalDegeneracyError(f"inverse from Cholesky factor failed (info={info})")
    return np.tril(inv) + np.tril(inv, -1).T
