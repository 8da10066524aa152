"""Least-angle ranking of the cells of one row.

A row is scored against a reference distribution by regressing the whitened
deviation on the whitened, Huber-downweighted coordinate directions without
an intercept.  Cells enter one at a time along equiangular directions and
never leave.  At every breakpoint we keep the exact least-squares fit of the
active columns (not the interpolated path coefficients), the residual sum of
squares, and its drop relative to the previous step.  The fit over the first
k cells equals the amount those cells must move to sit at their conditional
expectation given the remaining cells, which is what downstream imputation
uses.

Cells whose value is missing can be forced into the active set up front;
they are ordered among themselves by gradient magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dtrtrs

from .errors import InputError, SingularityError

HUBER_C = 1.5
# Equiangular steps at or below this length collapse to direct entry.
_STEP_CLAMP = 1e-14


def huber_weights(z, mu, sigma_diag) -> np.ndarray:
    """Per-cell penalty weights ``min(1, 1.5 / O_j)``.

    ``O_j`` is the absolute standardized deviation ``|z_j - mu_j| / sqrt(var_j)``.
    Missing cells (NaN) get weight 1.
    """
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(sigma_diag, dtype=float)
    if z.shape != mu.shape or z.shape != var.shape:
        raise InputError("z, mu and sigma_diag must have identical shapes")
    if not np.all(var > 0.0):
        raise InputError("variances must be strictly positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        outlyingness = np.abs(z - mu) / np.sqrt(var)
        w = np.minimum(1.0, HUBER_C / outlyingness)
    return np.where(np.isnan(w), 1.0, w)


@dataclass(frozen=True)
class DesignPair:
    """Whitened regression problem for one row.

    ``response`` is ``inv_root @ (z - mu)`` and ``design`` is
    ``inv_root @ diag(1 / weights)``, so coefficients in the weighted units can
    be mapped back to cell movements by dividing by the weights.
    """

    response: np.ndarray
    design: np.ndarray
    weights: np.ndarray


def build_design(z, mu, inv_root, weights) -> DesignPair:
    """Assemble the whitened, column-reweighted design for one row."""
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    inv_root = np.asarray(inv_root, dtype=float)
    weights = np.asarray(weights, dtype=float)
    d = z.size
    if mu.size != d or weights.size != d or inv_root.shape != (d, d):
        raise InputError("design inputs have inconsistent dimensions")
    if not np.isfinite(z).all():
        raise InputError("row must be fully observed here; replace missing cells first")
    if not np.all(weights > 0.0):
        raise InputError("weights must be strictly positive")
    response = inv_root @ (z - mu)
    design = inv_root / weights  # scales column j by 1 / w_j
    return DesignPair(response=response, design=design, weights=weights)


@dataclass(frozen=True)
class LarPath:
    """Entry order and per-step least-squares state for one row.

    ``rss[k]`` is the residual sum of squares of the exact active-set fit
    after k steps and ``drops[k-1] = rss[k-1] - rss[k]`` clamped at zero.
    The first ``forced_count`` entries of ``order`` were forced into the
    model before the equiangular walk.  Per-step fits are reconstructed from
    the stored triangular factor: :meth:`fit_at` gives the fit for one prefix
    and :attr:`fits` stacks all of them.
    """

    order: np.ndarray
    rss: np.ndarray
    drops: np.ndarray
    forced_count: int
    weights: np.ndarray = field(repr=False)
    r_mat: np.ndarray = field(repr=False)
    qty: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.order.size

    @property
    def positions(self) -> np.ndarray:
        """Inverse permutation: step index (0-based) at which each cell entered."""
        pos = np.empty(self.dim, dtype=int)
        pos[self.order] = np.arange(self.dim)
        return pos

    def fit_at(self, k: int) -> np.ndarray:
        """Active-set fit after k steps, in cell units (zero on inactive cells)."""
        if not 0 <= k <= self.dim:
            raise InputError(f"prefix length {k} out of range for dimension {self.dim}")
        fit = np.zeros(self.dim)
        if k:
            beta = solve_triangular(self.r_mat[:k, :k], self.qty[:k], check_finite=False)
            active = self.order[:k]
            fit[active] = beta / self.weights[active]
        return fit

    @cached_property
    def fits(self) -> np.ndarray:
        """All per-step fits stacked: shape (d + 1, d), row k for prefix length k."""
        return np.vstack([self.fit_at(k) for k in range(self.dim + 1)])


def lar_trace(pair: DesignPair, forced=()) -> LarPath:
    """Trace the full entry path of all cells of one row.

    Forced cells occupy the first path positions, ordered among themselves by
    gradient magnitude (ties to the lower index).  Remaining cells follow the
    equiangular walk on the part of the problem orthogonal to the forced
    columns, which keeps forced coefficients unpenalized.  Active-set fits are
    maintained through an incrementally extended QR factorization.
    """
    x_mat = np.ascontiguousarray(pair.design)
    y = pair.response
    d = x_mat.shape[1]
    forced_idx = np.unique(np.asarray(list(forced), dtype=int)) if len(forced) else np.empty(0, dtype=int)
    if forced_idx.size and (forced_idx[0] < 0 or forced_idx[-1] >= d):
        raise InputError(f"forced indices out of range for dimension {d}")
    n_forced = int(forced_idx.size)
    xt = x_mat.T.copy()

    q_mat = np.zeros((d, d))
    r_mat = np.zeros((d, d))
    qty = np.zeros(d)
    order = np.zeros(d, dtype=int)
    rss = np.zeros(d + 1)
    yy = float(y @ y)
    rss[0] = yy
    k = 0

    def append(j: int) -> None:
        nonlocal k
        col = x_mat[:, j]
        if k:
            q = col - q_mat[:, :k] @ (q_mat[:, :k].T @ col)
            q -= q_mat[:, :k] @ (q_mat[:, :k].T @ q)  # reorthogonalize
        else:
            q = col.copy()
        norm = math.sqrt(float(q @ q))
        if norm <= 1e-12 * max(1.0, math.sqrt(float(col @ col))):
            raise SingularityError(f"active columns became collinear when adding cell {j}")
        q_mat[:, k] = q / norm
        r_mat[: k + 1, k] = q_mat[:, : k + 1].T @ col
        qty[k] = q_mat[:, k] @ y
        order[k] = j
        k += 1
        resid = yy - float(qty[:k] @ qty[:k])
        rss[k] = resid if resid > 0.0 else 0.0

    if n_forced:
        grad = np.abs(xt[forced_idx] @ y)
        for j in forced_idx[np.lexsort((forced_idx, -grad))]:
            append(int(j))

    active_mask = np.zeros(d, dtype=bool)
    active_mask[order[:k]] = True
    mu_hat = q_mat[:, :n_forced] @ qty[:n_forced] if n_forced else np.zeros(d)
    degen_tol = 1e-13 * (1.0 + float(np.max(np.abs(xt @ (y - mu_hat)))))

    with np.errstate(divide="ignore", invalid="ignore"):
        while k < d:
            corr = xt @ (y - mu_hat)
            inactive = np.flatnonzero(~active_mask)
            if k == n_forced:
                # first free entry: largest gradient, no movement yet
                c_in = np.abs(corr[inactive])
                if c_in.max() <= degen_tol:
                    for j in inactive:
                        append(int(j))
                    break
                j_star = int(inactive[int(np.argmax(c_in))])
                append(j_star)
                active_mask[j_star] = True
                continue

            act = order[n_forced:k]
            c_act = corr[act]
            c_max = float(np.max(np.abs(c_act)))
            if c_max <= degen_tol:
                for j in inactive:
                    append(int(j))
                break

            signs = np.where(c_act >= 0.0, 1.0, -1.0)
            r_sub = r_mat[n_forced:k, n_forced:k]
            half, info = dtrtrs(r_sub, signs, lower=0, trans=1)
            if info == 0:
                v, info = dtrtrs(r_sub, half, lower=0, trans=0)
            if info != 0:
                raise SingularityError("equiangular direction is undefined (collinear active set)")
            denom = float(signs @ v)
            if denom <= 0.0:
                raise SingularityError("equiangular direction is undefined (collinear active set)")
            a_norm = 1.0 / math.sqrt(denom)
            u = a_norm * (q_mat[:, n_forced:k] @ (r_sub @ v))
            gamma_full = c_max / a_norm

            a_in = xt[inactive] @ u
            c_in = corr[inactive]
            g1 = (c_max - c_in) / (a_norm - a_in)
            g2 = (c_max + c_in) / (a_norm + a_in)
            gammas = np.full(inactive.size, np.inf)
            for g in (g1, g2):
                ok = np.isfinite(g) & (g >= -1e-12)
                gammas = np.where(ok, np.minimum(gammas, np.maximum(g, 0.0)), gammas)
            j_rel = int(np.argmin(gammas))
            gamma = float(gammas[j_rel])
            if not math.isfinite(gamma) or gamma > gamma_full:
                gamma = gamma_full
                j_rel = int(np.argmax(np.abs(c_in - gamma_full * a_in)))
            if gamma <= _STEP_CLAMP:
                gamma = 0.0
            mu_hat = mu_hat + gamma * u
            j_star = int(inactive[j_rel])
            append(j_star)
            active_mask[j_star] = True

    drops = np.maximum(rss[:-1] - rss[1:], 0.0)
    return LarPath(
        order=order,
        rss=rss,
        drops=drops,
        forced_count=n_forced,
        weights=np.asarray(pair.weights, dtype=float),
        r_mat=r_mat,
        qty=qty,
    )
