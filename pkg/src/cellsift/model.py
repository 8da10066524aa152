"""Reference distribution for a table: location, covariance, cached inverse root."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .numkit import _as_sym, pd_inverse_sqrt


@dataclass(frozen=True)
class CovModel:
    """Location vector, PD covariance, and its symmetric PD inverse root."""

    mu: np.ndarray
    sigma: np.ndarray
    inv_root: np.ndarray

    @classmethod
    def from_moments(cls, mu, sigma) -> "CovModel":
        """Build a model from a location vector and a PD covariance matrix."""
        mu = np.asarray(mu, dtype=float).ravel().copy()
        sigma = _as_sym(sigma, "covariance")
        if sigma.shape[0] != mu.size:
            raise InputError(
                f"location has length {mu.size} but covariance is {sigma.shape[0]}x{sigma.shape[1]}"
            )
        if not np.isfinite(mu).all():
            raise InputError("location vector has non-finite entries")
        return cls(mu=mu, sigma=sigma, inv_root=pd_inverse_sqrt(sigma))

    @property
    def dim(self) -> int:
        return self.mu.size
