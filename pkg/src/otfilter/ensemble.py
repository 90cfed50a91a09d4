"""Particle ensemble container shared by every filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Ensemble"]


@dataclass
class Ensemble:
    """N particles in n dimensions with optional normalized weights.

    ``weights is None`` means uniform.  Explicit weights must be nonnegative
    and sum to one within 1e-12.
    """

    particles: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if self.particles.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 particles")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (self.particles.shape[0],):
                raise ValueError("weights length must match particle count")
            if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be nonnegative and sum to 1")

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    @property
    def is_uniform(self) -> bool:
        return self.weights is None

    def mean(self) -> np.ndarray:
        if self.weights is None:
            return self.particles.mean(axis=0)
        return self.weights @ self.particles

    def cov(self) -> np.ndarray:
        """Empirical covariance; uniform ensembles use the 1/(N-1) normalization."""
        m = self.mean()
        centered = self.particles - m
        if self.weights is None:
            return centered.T @ centered / (self.size - 1)
        return (centered * self.weights[:, None]).T @ centered
