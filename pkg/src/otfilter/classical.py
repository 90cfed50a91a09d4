"""Kalman filter (exact oracle), EnKF update, and SIR update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .ensemble import Ensemble
from .models import StateSpaceModel

__all__ = [
    "GaussianBelief",
    "SingularInnovationError",
    "DegenerateWeightsError",
    "kalman_gain",
    "kalman_update",
    "enkf_update",
    "importance_weights",
    "multinomial_resample",
    "systematic_resample",
    "sir_update",
    "effective_sample_size",
]


class SingularInnovationError(np.linalg.LinAlgError):
    """Innovation covariance could not be factorized."""


class DegenerateWeightsError(ValueError):
    """Every particle received zero likelihood."""


@dataclass
class GaussianBelief:
    """Mean and covariance of a Gaussian posterior (exact-filter state)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(self.cov)) < -1e-10:
            raise ValueError("covariance must be positive semidefinite")


def _sym_solve_right(S: np.ndarray, B: np.ndarray, context: str) -> np.ndarray:
    """Solve X S = B for X with S symmetric PD, via Cholesky (no explicit inverse)."""
    try:
        factor = cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError(f"{context}: innovation covariance is singular") from exc
    return cho_solve(factor, B.T).T


def kalman_gain(Sigma: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """K = Sigma H^T (H Sigma H^T + R)^{-1} via a symmetric solve."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=np.float64))
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    S = H @ Sigma @ H.T + R
    return _sym_solve_right(S, Sigma @ H.T, "kalman_gain")


def kalman_update(belief: GaussianBelief, H, R, y) -> GaussianBelief:
    """Posterior mean m + K(y - Hm) and covariance Sigma - K H Sigma (re-symmetrized)."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    K = kalman_gain(belief.cov, H, R)
    mean = belief.mean + K @ (y - H @ belief.mean)
    cov = belief.cov - K @ H @ belief.cov
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T))


def enkf_update(ens: Ensemble, y: np.ndarray, model: StateSpaceModel,
                rng: np.random.Generator) -> Ensemble:
    """EnKF Bayes update: shift each particle by the empirical-gain innovation.

    Simulates one observation per particle, estimates the nonlinear-form gain
    K = Cov(X, Y) Cov(Y)^{-1} with 1/(N-1) covariances, and returns particles
    X^i + K (y - Y^i) with uniform weights.
    """
    if not ens.is_uniform:
        raise ValueError("enkf_update requires uniform weights")
    if ens.size < ens.dim + 2:
        raise ValueError("enkf_update needs at least dim + 2 particles")
    X = ens.particles
    Y = model.sample_observation(X, rng)
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    cxy = Xc.T @ Yc / (ens.size - 1)
    cyy = Yc.T @ Yc / (ens.size - 1)
    try:
        K = _sym_solve_right(cyy, cxy, "enkf_update")
    except SingularInnovationError:
        # one retry with trace-scaled jitter; a zero-noise observation model
        # can make Cov(Y) rank deficient
        jitter = 1e-10 * np.trace(cyy) / cyy.shape[0] + 1e-300
        try:
            K = _sym_solve_right(cyy + jitter * np.eye(cyy.shape[0]), cxy, "enkf_update")
        except SingularInnovationError as exc:
            raise SingularInnovationError(
                "enkf_update: Cov(Y) is singular; add observation noise to the model"
            ) from exc
    return Ensemble(X + (np.asarray(y) - Y) @ K.T)


def importance_weights(ens: Ensemble, y: np.ndarray, model: StateSpaceModel) -> np.ndarray:
    """Normalized likelihood weights, computed in log space for stability."""
    logl = model.log_likelihood(y, ens.particles)
    if logl is None:
        raise ValueError("importance weights need a model with an analytic likelihood")
    logl = np.asarray(logl, dtype=np.float64)
    if not ens.is_uniform:
        logl = logl + np.log(ens.weights)
    top = np.max(logl)
    if not np.isfinite(top):
        raise DegenerateWeightsError("all particles have zero likelihood")
    w = np.exp(logl - top)
    return w / w.sum()


def multinomial_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """N i.i.d. categorical draws from the weight vector (index array)."""
    weights = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(weights.shape[0]))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-variance systematic resampling (diagnostic alternative, not the default)."""
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cdf, u)


def sir_update(ens: Ensemble, y: np.ndarray, model: StateSpaceModel,
               rng: np.random.Generator, systematic: bool = False) -> Ensemble:
    """Sequential importance resampling: weight by likelihood, then resample."""
    w = importance_weights(ens, y, model)
    idx = systematic_resample(w, rng) if systematic else multinomial_resample(w, rng)
    return Ensemble(ens.particles[idx])


def effective_sample_size(weights: np.ndarray) -> float:
    """1 / sum(w_i^2): degeneracy diagnostic for importance weights."""
    weights = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(weights * weights))
