"""Dense symmetric-matrix primitives and the chi-square quantile.

All routines are pure functions of their arguments and deterministic for
identical inputs, so they are safe to call concurrently.  Matrices are plain
``numpy`` arrays; symmetry is enforced on entry by averaging with the
transpose.
"""

from __future__ import annotations

import math
from statistics import NormalDist
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, InputError, SingularityError

# Relative eigenvalue floor below which a matrix counts as singular.
PD_FLOOR_REL = 1e-12
MAX_PSD_ITER = 200
_PSD_TOL = 1e-9


class EigenDecomposition(NamedTuple):
    """Eigenvalues sorted nonincreasing with matching orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray


def _as_sym(s, name: str = "matrix") -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InputError(f"{name} must be square, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise InputError(f"{name} has non-finite entries")
    return 0.5 * (s + s.T)


def sym_eigen(s) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix, eigenvalues nonincreasing."""
    s = _as_sym(s)
    vals, vecs = np.linalg.eigh(s)
    return EigenDecomposition(values=vals[::-1].copy(), vectors=vecs[:, ::-1].copy())


def pd_inverse_sqrt(s) -> np.ndarray:
    """The unique symmetric PD matrix R with R @ s @ R = I.

    Raises
    ------
    SingularityError
        If the smallest eigenvalue is at or below the relative floor
        ``PD_FLOOR_REL * largest eigenvalue``.
    """
    s = _as_sym(s)
    vals, vecs = np.linalg.eigh(s)
    floor = PD_FLOOR_REL * vals[-1]
    if vals[0] <= floor:
        raise SingularityError(
            f"matrix is numerically singular: smallest eigenvalue {vals[0]:.6e} "
            f"<= floor {floor:.6e}"
        )
    r = (vecs / np.sqrt(vals)) @ vecs.T
    return 0.5 * (r + r.T)


def nearest_psd(s, unit_diagonal: bool = False, max_iter: int = MAX_PSD_ITER) -> np.ndarray:
    """Nearest positive semidefinite matrix, optionally with unit diagonal.

    Without ``unit_diagonal`` this is a single eigenvalue clip.  With it, the
    clip alternates with diagonal restoration (plus the usual correction term
    so the alternation converges to the nearest point, not just a feasible
    one) until successive iterates change by less than 1e-9 in Frobenius norm.
    """
    y = _as_sym(s)
    if not unit_diagonal:
        vals, vecs = np.linalg.eigh(y)
        if vals[0] >= 0.0:
            return y
        x = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        return 0.5 * (x + x.T)

    correction = np.zeros_like(y)
    change = np.inf
    for _ in range(max_iter):
        r = y - correction
        vals, vecs = np.linalg.eigh(r)
        x = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        x = 0.5 * (x + x.T)
        correction = x - r
        y_new = x.copy()
        np.fill_diagonal(y_new, 1.0)
        change = float(np.linalg.norm(y_new - y, "fro"))
        y = y_new
        if change < _PSD_TOL and np.linalg.eigvalsh(y)[0] >= -1e-10:
            return 0.5 * (y + y.T)
    raise ConvergenceError(
        f"nearest_psd did not converge in {max_iter} iterations "
        f"(last change {change:.3e})"
    )


def _gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if x < 0.0 or a <= 0.0:
        raise InputError("incomplete gamma needs a > 0 and x >= 0")
    if x == 0.0:
        return 0.0
    log_pref = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        # power series around zero
        ap = a
        total = 1.0 / a
        term = total
        for _ in range(1000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-17:
                break
        return min(1.0, total * math.exp(log_pref))
    # continued fraction (modified Lentz) for the upper tail
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return max(0.0, 1.0 - math.exp(log_pref) * h)


def chi2_cdf(df: int, x: float) -> float:
    """CDF of the chi-square distribution with ``df`` degrees of freedom."""
    if x <= 0.0:
        return 0.0
    return _gammainc_lower(0.5 * df, 0.5 * x)


def chi2_quantile(df: int, p: float) -> float:
    """Quantile of the chi-square distribution with ``df`` degrees of freedom.

    Newton iterations on the regularized incomplete gamma, started from the
    Wilson-Hilferty cube approximation, with bisection whenever a Newton step
    leaves the current bracket.  Accurate to 1e-10 in CDF terms.
    """
    if not 0.0 < p < 1.0:
        raise InputError(f"probability must lie in (0, 1), got {p!r}")
    if df < 1 or df != int(df):
        raise InputError(f"degrees of freedom must be a positive integer, got {df!r}")
    df = int(df)
    a = 0.5 * df

    z = NormalDist().inv_cdf(p)
    t = 2.0 / (9.0 * df)
    x = df * (1.0 - t + z * math.sqrt(t)) ** 3
    if not math.isfinite(x) or x <= 0.0:
        x = float(df)

    lo = 0.0
    hi = max(4.0 * df, 4.0 * x, 1.0)
    for _ in range(200):
        if chi2_cdf(df, hi) >= p:
            break
        hi *= 2.0
    else:
        raise ConvergenceError("chi2_quantile failed to bracket the target")
    x = min(max(x, 1e-300), hi)

    log_norm = a * math.log(2.0) + math.lgamma(a)
    for _ in range(200):
        f = chi2_cdf(df, x) - p
        if f > 0.0:
            hi = min(hi, x)
        else:
            lo = max(lo, x)
        if abs(f) < 1e-13:
            break
        pdf = math.exp((a - 1.0) * math.log(x) - 0.5 * x - log_norm)
        if pdf > 0.0 and math.isfinite(pdf):
            x_new = x - f / pdf
        else:
            x_new = 0.5 * (lo + hi)
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) < 1e-15 * max(1.0, x) and abs(f) < 1e-10:
            x = x_new
            break
        x = x_new
    return float(x)


def mahalanobis2(z, mu, inv_root) -> float:
    """Squared Mahalanobis distance ``||inv_root @ (z - mu)||^2``.

    ``inv_root`` must be the symmetric PD inverse root of the covariance.
    """
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    inv_root = np.asarray(inv_root, dtype=float)
    if z.shape != mu.shape or z.ndim != 1:
        raise InputError(f"z and mu must be vectors of equal length, got {z.shape} and {mu.shape}")
    if inv_root.shape != (z.size, z.size):
        raise InputError(f"inverse root has shape {inv_root.shape}, expected {(z.size, z.size)}")
    r = inv_root @ (z - mu)
    return float(r @ r)
