"""Scatter-matrix discrepancies, data generators, contamination, scoring.

Randomness goes through named substreams of a single seed (see
:func:`substream`) so benchmark tables are bit-reproducible across platforms:
stream 0 draws correlation matrices, stream 1 contamination positions,
stream 2 clean data values; replication indices extend the path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SingularityError
from .numkit import _as_sym, pd_inverse_sqrt

STREAM_MATRIX = 0
STREAM_POSITIONS = 1
STREAM_VALUES = 2


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent PCG64 generator for a (seed, path) pair."""
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    )


def _whitened_eigenvalues(a, b) -> np.ndarray:
    a = _as_sym(a, "A")
    root = pd_inverse_sqrt(b)  # rejects a non-PD reference
    c = root @ a @ root
    vals = np.linalg.eigvalsh(0.5 * (c + c.T))
    if vals[0] < -1e-8 * max(1.0, abs(vals[-1])):
        raise InputError(f"A is not positive semidefinite (eigenvalue {vals[0]:.3e})")
    return vals


def discrepancy(a, b) -> float:
    """How far scatter matrix ``a`` deviates from the PD reference ``b``.

    Sum of ``eta - 1 - log(eta)`` over the eigenvalues of ``a`` whitened by
    ``b``.  Zero exactly when the matrices agree; ``+inf`` when ``a`` is
    singular, which makes it unusable as an approximation of ``b``.
    """
    vals = _whitened_eigenvalues(a, b)
    if np.any(vals <= 0.0):
        return math.inf
    return float(np.sum(vals - 1.0 - np.log(vals)))


def kl_gaussian(a, b) -> float:
    """Kullback-Leibler divergence between centered Gaussians with covariances a, b.

    Evaluated directly as ``tr(a b^-1) - d - log det(a b^-1)``; agrees with
    :func:`discrepancy` when both matrices are PD.
    """
    a = _as_sym(a, "A")
    b = _as_sym(b, "B")
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.shape[0]
    sign_a, logdet_a = np.linalg.slogdet(a)
    sign_b, logdet_b = np.linalg.slogdet(b)
    if sign_a <= 0 or sign_b <= 0:
        raise SingularityError("both covariance matrices must be positive definite")
    trace_term = float(np.trace(np.linalg.solve(b, a)))
    return trace_term - d - (logdet_a - logdet_b)


def discrepancy_symmetric(a, b, kind: str = "plus_inverse") -> float:
    """Order-invariant variant of the discrepancy; both matrices must be PD.

    ``plus_inverse`` sums ``eta + 1/eta - 2``; ``abs_log`` sums ``|log eta|``.
    """
    vals = _whitened_eigenvalues(a, b)
    if np.any(vals <= 0.0):
        raise SingularityError("symmetric discrepancy needs both matrices positive definite")
    if kind == "plus_inverse":
        return float(np.sum(vals + 1.0 / vals - 2.0))
    if kind == "abs_log":
        return float(np.sum(np.abs(np.log(vals))))
    raise InputError(f"unknown kind {kind!r}; expected 'plus_inverse' or 'abs_log'")


def gen_a09(d: int) -> np.ndarray:
    """Correlation matrix with entries ``(-0.9)^|j-h|``: strong and weak mixed."""
    if d < 1:
        raise InputError("dimension must be at least 1")
    idx = np.arange(d)
    return (-0.9) ** np.abs(idx[:, None] - idx[None, :])


def gen_randcorr(d: int, seed, eta: float = 2.0) -> np.ndarray:
    """Random correlation matrix via the vine construction.

    Partial correlations are drawn from layer-wise Beta distributions mapped
    to (-1, 1); larger ``eta`` concentrates them near zero, giving the
    typically modest correlations wanted for benchmark scenarios.  ``seed``
    may be an integer or a ``numpy`` Generator.
    """
    if d < 2:
        raise InputError("dimension must be at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else substream(int(seed), STREAM_MATRIX)
    partial = np.zeros((d, d))
    corr = np.eye(d)
    beta_param = eta + (d - 1) / 2.0
    for k in range(d - 1):
        beta_param -= 0.5
        for i in range(k + 1, d):
            rho = 2.0 * rng.beta(beta_param, beta_param) - 1.0
            partial[k, i] = rho
            for layer in range(k - 1, -1, -1):
                rho = rho * math.sqrt(
                    (1.0 - partial[layer, i] ** 2) * (1.0 - partial[layer, k] ** 2)
                ) + partial[layer, i] * partial[layer, k]
            corr[k, i] = corr[i, k] = rho
    return corr


@dataclass(frozen=True)
class ContaminationSpec:
    """What to corrupt: cell fraction per column, magnitude, and placement mode.

    ``mode`` is ``"cell"`` (scattered cells), ``"row"`` (whole rows), or
    ``"mixed"`` (rows first, then cells scattered over the untouched rows).
    ``epsilon`` is the per-column cell fraction; ``row_frac`` the fraction of
    replaced rows for row/mixed modes.
    """

    epsilon: float = 0.1
    gamma: float = 5.0
    mode: str = "cell"
    row_frac: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epsilon < 0.0 or self.row_frac < 0.0:
            raise InputError("contamination fractions must be nonnegative")
        if self.epsilon + self.row_frac > 1.0:
            raise InputError("cell and row fractions must sum to at most 1")
        if self.gamma < 0.0:
            raise InputError("gamma must be nonnegative")
        if self.mode not in ("cell", "row", "mixed"):
            raise InputError(f"unknown mode {self.mode!r}")


def _least_eigvec(sigma: np.ndarray) -> tuple[np.ndarray, float]:
    vals, vecs = np.linalg.eigh(sigma)
    if vals[0] <= 0.0:
        raise SingularityError("restricted covariance is singular")
    u = vecs[:, 0]
    lead = np.flatnonzero(np.abs(u) > 1e-12)
    if lead.size and u[lead[0]] < 0.0:  # sign convention: first nonzero component positive
        u = -u
    return u, float(vals[0])


def _replace_structured(values: np.ndarray, mask: np.ndarray, sigma: np.ndarray, gamma: float) -> None:
    """Replace masked cells row by row with low-variance-direction vectors.

    The replacement for a row with k masked cells points along the smallest
    eigenvector of the restricted covariance, scaled so its Mahalanobis
    distance under that restriction is ``sqrt(k) * gamma``.
    """
    for i in np.flatnonzero(mask.any(axis=1)):
        idx = np.flatnonzero(mask[i])
        u, smallest = _least_eigvec(sigma[np.ix_(idx, idx)])
        # unit eigenvector: MD(u) = 1/sqrt(smallest eigenvalue)
        values[i, idx] = gamma * math.sqrt(idx.size) * math.sqrt(smallest) * u


def contaminate_cellwise(data, sigma, spec: ContaminationSpec, rng=None):
    """Corrupt ``floor(n * epsilon)`` cells per column of a clean table.

    Returns the corrupted copy and the boolean truth mask.  Cell positions
    are drawn without replacement per column from the positions substream of
    ``spec.seed`` (or from ``rng`` if given).
    """
    values = np.array(data, dtype=float)
    n, d = values.shape
    sigma = _as_sym(sigma)
    per_col = int(math.floor(n * spec.epsilon))
    if spec.epsilon > 0.0 and per_col < 1:
        raise InputError(f"epsilon {spec.epsilon} selects no cells for n={n}")
    if rng is None:
        rng = substream(spec.seed, STREAM_POSITIONS)
    mask = np.zeros((n, d), dtype=bool)
    for j in range(d):
        if per_col:
            mask[rng.choice(n, size=per_col, replace=False), j] = True
    _replace_structured(values, mask, sigma, spec.gamma)
    return values, mask


def contaminate_rowwise(data, sigma, spec: ContaminationSpec, rng=None):
    """Replace ``floor(n * row_frac)`` whole rows; mixed mode then scatters cells.

    Replaced rows point along the smallest eigenvector of the full covariance
    with Mahalanobis distance ``gamma * d * sqrt(d)``.  In mixed mode the
    cellwise positions are drawn from the remaining rows only.
    """
    values = np.array(data, dtype=float)
    n, d = values.shape
    sigma = _as_sym(sigma)
    n_rows = int(math.floor(n * spec.row_frac))
    if spec.row_frac > 0.0 and n_rows < 1:
        raise InputError(f"row_frac {spec.row_frac} selects no rows for n={n}")
    if rng is None:
        rng = substream(spec.seed, STREAM_POSITIONS)
    rows = rng.choice(n, size=n_rows, replace=False) if n_rows else np.empty(0, dtype=int)
    u, smallest = _least_eigvec(sigma)
    # unit eigenvector: MD(u) = 1/sqrt(smallest eigenvalue)
    row_value = spec.gamma * d * math.sqrt(d) * math.sqrt(smallest) * u
    mask = np.zeros((n, d), dtype=bool)
    values[rows] = row_value
    mask[rows] = True

    if spec.mode == "mixed" and spec.epsilon > 0.0:
        remaining = np.setdiff1d(np.arange(n), rows)
        per_col = int(math.floor(n * spec.epsilon))
        if per_col < 1:
            raise InputError(f"epsilon {spec.epsilon} selects no cells for n={n}")
        if per_col > remaining.size:
            raise InputError("not enough untouched rows for the requested cell fraction")
        cell_mask = np.zeros((n, d), dtype=bool)
        for j in range(d):
            cell_mask[rng.choice(remaining, size=per_col, replace=False), j] = True
        _replace_structured(values, cell_mask, sigma, spec.gamma)
        mask |= cell_mask
    return values, mask


def contaminate(data, sigma, spec: ContaminationSpec, rng=None):
    """Dispatch on ``spec.mode``."""
    if spec.mode == "cell":
        return contaminate_cellwise(data, sigma, spec, rng=rng)
    return contaminate_rowwise(data, sigma, spec, rng=rng)


@dataclass(frozen=True)
class ScoreReport:
    """Cell-level detection quality: recall, precision, and their harmonic mean."""

    recall: float
    precision: float
    f_score: float
    true_count: int
    flagged_count: int
    intersection_count: int
    notes: tuple[str, ...] = field(default=())


def score_flags(flagged, truth) -> ScoreReport:
    """Compare a flagged-cell mask against the generated truth mask.

    Zero denominators (nothing generated, or nothing flagged) yield zeros
    with an explanatory note rather than an error.
    """
    flagged = np.asarray(flagged, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if flagged.shape != truth.shape:
        raise InputError(f"mask shapes differ: {flagged.shape} vs {truth.shape}")
    n_true = int(truth.sum())
    n_flag = int(flagged.sum())
    n_both = int((flagged & truth).sum())
    notes = []
    if n_true == 0:
        recall = 0.0
        notes.append("no cells were generated as outlying; recall undefined")
    else:
        recall = n_both / n_true
    if n_flag == 0:
        precision = 0.0
        notes.append("no cells were flagged; precision undefined")
    else:
        precision = n_both / n_flag
    f_score = 0.0 if (precision + recall) == 0.0 else 2.0 * precision * recall / (precision + recall)
    return ScoreReport(
        recall=recall,
        precision=precision,
        f_score=f_score,
        true_count=n_true,
        flagged_count=n_flag,
        intersection_count=n_both,
        notes=tuple(notes),
    )
