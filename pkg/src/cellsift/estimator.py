"""Robust location/covariance estimation by alternating detection and imputation.

Columns are first standardized by median and scaled median absolute
deviation.  Starting from a cheap initial estimate, each iteration flags the
most outlying cells across all rows (capped per column so no variable loses
too much information) and then re-estimates the moments as one EM step that
treats flagged and missing cells as unobserved, including the usual
conditional-covariance bias correction.  Iteration stops when successive
moment estimates change by less than a tolerance; a final detection pass with
the converged model produces the reported flags, which are unstandardized
together with the moments.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .cellhandler import resolve_prefix, trace_row
from .errors import InputError, ShapeError, SingularityError
from .model import CovModel
from .numkit import PD_FLOOR_REL, chi2_quantile, nearest_psd
from .tableio import DataTable

logger = logging.getLogger(__name__)

MAD_SCALE = 1.4826  # makes the MAD a consistent standard-deviation estimate
_RANK_RIDGE = 1e-6


@dataclass(frozen=True)
class ColumnScaler:
    """Per-column robust location (median) and scale (1.4826 * MAD)."""

    locations: np.ndarray
    scales: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.locations) / self.scales

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return self.locations + values * self.scales

    def transform_model(self, mu, sigma) -> tuple[np.ndarray, np.ndarray]:
        mu_std = (np.asarray(mu, float) - self.locations) / self.scales
        sigma_std = np.asarray(sigma, float) / np.outer(self.scales, self.scales)
        return mu_std, sigma_std

    def inverse_model(self, mu, sigma) -> tuple[np.ndarray, np.ndarray]:
        mu_raw = self.locations + self.scales * np.asarray(mu, float)
        sigma_raw = np.asarray(sigma, float) * np.outer(self.scales, self.scales)
        return mu_raw, sigma_raw


def robust_scales(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Median and scaled MAD per column over observed cells."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns yield NaN
        loc = np.nanmedian(values, axis=0)
        mad = np.nanmedian(np.abs(values - loc), axis=0)
    return loc, MAD_SCALE * mad


def standardize(data: DataTable) -> tuple[DataTable, ColumnScaler]:
    """Center by column medians and scale by 1.4826 * MAD.

    Columns whose scale is zero or undefined are rejected; callers that want
    to drop them instead must do so before estimation.
    """
    loc, scale = robust_scales(data.values)
    bad = ~(scale > 0.0)
    if bad.any():
        names = ", ".join(data.columns[j] for j in np.flatnonzero(bad))
        raise InputError(f"columns with zero or undefined scale: {names}")
    scaler = ColumnScaler(locations=loc, scales=scale)
    return DataTable(scaler.transform(data.values), list(data.columns)), scaler


def _cell_list(mask: np.ndarray, columns: list[str], limit: int = 12) -> str:
    coords = list(zip(*np.nonzero(mask)))
    shown = ", ".join(f"(row {i}, column {columns[j]})" for i, j in coords[:limit])
    extra = len(coords) - limit
    return shown + (f", and {extra} more" if extra > 0 else "")


def clr_transform(data: DataTable) -> DataTable:
    """Per-row centered log ratio: log values minus their row mean.

    The mean runs over the observed cells of each row, so every output row
    sums to zero over its observed cells.  All observed entries must be
    strictly positive.
    """
    values = data.values
    bad = (values <= 0.0) & ~np.isnan(values)
    if bad.any():
        raise InputError(
            "log-ratio transform needs positive values; offending cells: "
            + _cell_list(bad, data.columns)
        )
    with np.errstate(invalid="ignore"):
        logs = np.log(values)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        row_means = np.nanmean(logs, axis=1, keepdims=True)
    return DataTable(logs - row_means, list(data.columns))


def _rank_correlation(values: np.ndarray, columns: list[str]) -> np.ndarray:
    """Pairwise-complete Spearman correlations mapped to a PD matrix."""
    n, d = values.shape
    observed = ~np.isnan(values)
    corr = np.eye(d)
    for j in range(d):
        for h in range(j + 1, d):
            both = observed[:, j] & observed[:, h]
            m = int(both.sum())
            if m < 3:
                raise InputError(
                    f"columns {columns[j]!r} and {columns[h]!r} share only {m} complete pairs"
                )
            r = np.corrcoef(rankdata(values[both, j]), rankdata(values[both, h]))[0, 1]
            if not np.isfinite(r):
                r = 0.0
            corr[j, h] = corr[h, j] = 2.0 * math.sin(math.pi * r / 6.0)
    corr = nearest_psd(corr, unit_diagonal=True)
    vals = np.linalg.eigvalsh(corr)
    lift = max(0.0, _RANK_RIDGE - vals[0])
    if lift > 0.0:
        corr = corr + lift * np.eye(d)
        diag = np.sqrt(np.diag(corr))
        corr = corr / np.outer(diag, diag)
    return corr


def initial_estimate(data: DataTable, method="rank") -> CovModel:
    """Starting moments for the iteration, in standardized units.

    ``method`` is ``"rank"`` (pairwise Spearman correlations, consistency
    transformed and lifted to PD), ``"diagonal"`` (identity), or a
    ``(mu, sigma)`` pair supplied by the caller, already in standardized
    units, validated for positive definiteness.
    """
    n, d = data.values.shape
    if n <= d:
        raise ShapeError(f"initial estimate needs more rows than columns (n={n}, d={d})")
    if isinstance(method, str):
        if method == "rank":
            return CovModel.from_moments(np.zeros(d), _rank_correlation(data.values, data.columns))
        if method == "diagonal":
            return CovModel.from_moments(np.zeros(d), np.eye(d))
        raise InputError(f"unknown initial estimate {method!r}")
    mu, sigma = method
    return CovModel.from_moments(mu, sigma)


@dataclass(frozen=True)
class FlagSet:
    """Flagged cells across a table, sorted by (row, column).

    Missing cells are part of the set (they are always imputed); their
    ``missing`` entry is true, their criterion is ``+inf`` and their residual
    is zero.  ``imputed`` holds the conditional expectation of each flagged
    cell given its row's unflagged cells.
    """

    row: np.ndarray
    col: np.ndarray
    imputed: np.ndarray
    criterion: np.ndarray
    residual: np.ndarray
    missing: np.ndarray
    shape: tuple[int, int]

    def __len__(self) -> int:
        return int(self.row.size)

    def to_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[self.row, self.col] = True
        return mask

    def column_counts(self) -> np.ndarray:
        """Flagged-or-missing cells per column."""
        return np.bincount(self.col, minlength=self.shape[1])


def d_step(data: DataTable, model: CovModel, q: float, max_col: int) -> FlagSet:
    """Flag the most outlying cells across all rows, capped per column.

    Every row is traced against ``model``; then all cells are walked in order
    of decreasing criterion (ties: lower row, then earlier path position).  A
    cell below the cutoff locks its row.  A cell above the cutoff is flagged
    unless its column already holds ``max_col`` flagged-or-missing cells, in
    which case its row is locked too.  Missing cells are pre-charged to their
    columns and always flagged.
    """
    values = data.values
    n, d = values.shape
    if model.dim != d:
        raise InputError(f"model dimension {model.dim} does not match table width {d}")
    if not q > 0.0:
        raise InputError(f"cutoff must be positive, got {q!r}")
    if max_col < 0:
        raise InputError("max_col must be nonnegative")

    missing = np.isnan(values)
    paths = []
    crits = np.empty((n, d))
    filled = np.empty_like(values)
    positions = np.empty((n, d), dtype=int)
    for i in range(n):
        path, crit, fill, _ = trace_row(values[i], model)
        paths.append(path)
        crits[i] = crit
        filled[i] = fill
        positions[i, path.order] = np.arange(d)

    flat_crit = crits.ravel()
    row_of = np.repeat(np.arange(n), d)
    walk = np.lexsort((positions.ravel(), row_of, -flat_crit))

    locked = np.zeros(n, dtype=bool)
    col_count = missing.sum(axis=0).astype(int)
    flag_len = np.zeros(n, dtype=int)
    locked_total = 0
    for idx in walk:
        i = idx // d
        if locked[i]:
            continue
        if not flat_crit[idx] > q:
            locked[i] = True
            locked_total += 1
            if locked_total == n:
                break
            continue
        j = idx - i * d
        if missing[i, j]:
            assert positions[i, j] == flag_len[i]
            flag_len[i] += 1
            continue
        if col_count[j] >= max_col:
            locked[i] = True
            locked_total += 1
            if locked_total == n:
                break
            continue
        assert positions[i, j] == flag_len[i]
        col_count[j] += 1
        flag_len[i] += 1

    rows_out: list[np.ndarray] = []
    cols_out: list[np.ndarray] = []
    imp_out: list[np.ndarray] = []
    crit_out: list[np.ndarray] = []
    res_out: list[np.ndarray] = []
    miss_out: list[np.ndarray] = []
    for i in range(n):
        count = int(flag_len[i])
        if count == 0:
            continue
        det = resolve_prefix(paths[i], crits[i], filled[i], missing[i], count)
        cells = np.sort(det.flagged)
        rows_out.append(np.full(count, i))
        cols_out.append(cells)
        imp_out.append(det.imputed[cells])
        crit_out.append(crits[i, cells])
        res_out.append(det.residuals[cells])
        miss_out.append(missing[i, cells])

    def cat(parts, dtype):
        return np.concatenate(parts) if parts else np.empty(0, dtype=dtype)

    return FlagSet(
        row=cat(rows_out, int),
        col=cat(cols_out, int),
        imputed=cat(imp_out, float),
        criterion=cat(crit_out, float),
        residual=cat(res_out, float),
        missing=cat(miss_out, bool),
        shape=(n, d),
    )


def i_step(data: DataTable, flags, prev: CovModel) -> CovModel:
    """One EM-style moment update treating flagged and missing cells as unobserved.

    Imputes each unobserved block by its conditional expectation under
    ``prev``, takes column means, and adds each row's conditional covariance
    of the imputed block (embedded at the imputed coordinates) to the
    cross-product matrix before dividing by n.  If the result dips below the
    PD floor, eigenvalues are clipped up to it so the next iteration stays
    well defined.
    """
    values = data.values
    n, d = values.shape
    if n == 0:
        raise ShapeError("cannot re-estimate moments from an empty table")
    if prev.dim != d:
        raise InputError(f"model dimension {prev.dim} does not match table width {d}")
    fmask = flags.to_mask() if isinstance(flags, FlagSet) else np.asarray(flags, dtype=bool)
    impute = fmask | np.isnan(values)

    precision = prev.inv_root @ prev.inv_root
    xhat = np.where(impute, 0.0, values)
    bias = np.zeros((d, d))
    for i in np.flatnonzero(impute.any(axis=1)):
        idx = np.flatnonzero(impute[i])
        if idx.size == d:
            xhat[i] = prev.mu
            bias += prev.sigma
            continue
        obs = np.flatnonzero(~impute[i])
        block = np.linalg.inv(precision[np.ix_(idx, idx)])
        resid = values[i, obs] - prev.mu[obs]
        xhat[i, idx] = prev.mu[idx] - block @ (precision[np.ix_(idx, obs)] @ resid)
        bias[np.ix_(idx, idx)] += block

    mu = xhat.mean(axis=0)
    centered = xhat - mu
    sigma = (centered.T @ centered + bias) / n
    sigma = 0.5 * (sigma + sigma.T)
    if not np.isfinite(sigma).all():
        raise SingularityError("moment update produced non-finite values")
    vals, vecs = np.linalg.eigh(sigma)
    if vals[-1] <= 0.0:
        raise SingularityError("moment update collapsed to a degenerate covariance")
    floor = PD_FLOOR_REL * vals[-1]
    if vals[0] <= floor:
        logger.debug("PD guard: clipping eigenvalues below %.3e", floor)
        sigma = (vecs * np.maximum(vals, floor)) @ vecs.T
        sigma = 0.5 * (sigma + sigma.T)
    return CovModel.from_moments(mu, sigma)


@dataclass(frozen=True)
class DiConfig:
    """Knobs for the detect/impute iteration.

    ``initial`` is ``"rank"``, ``"diagonal"``, or a ``(mu, sigma)`` pair in
    the units of the raw data; it is standardized internally.
    """

    quantile: float = 0.99
    max_col_frac: float = 0.25
    max_iter: int = 25
    tol: float = 1e-6
    initial: object = "rank"

    def __post_init__(self) -> None:
        if not 0.0 < self.quantile < 1.0:
            raise InputError(f"quantile must lie in (0, 1), got {self.quantile!r}")
        if not 0.0 < self.max_col_frac < 1.0:
            raise InputError(f"max_col_frac must lie in (0, 1), got {self.max_col_frac!r}")
        if self.max_iter < 1:
            raise InputError("max_iter must be at least 1")
        if not self.tol > 0.0:
            raise InputError("tol must be positive")


@dataclass
class DiResult:
    """Converged moments, final flags, and iteration diagnostics (raw units)."""

    model: CovModel
    flags: FlagSet
    iterations: int
    converged: bool
    criterion_history: list[float]
    initial_model: CovModel
    scaler: ColumnScaler
    column_indices: np.ndarray
    excluded: list[tuple[int, str]] = field(default_factory=list)


def di_estimate(data: DataTable, config: DiConfig | None = None) -> DiResult:
    """Estimate robust moments of a table by alternating detection and imputation.

    Columns with more missing cells than the per-column flag budget are set
    aside with a warning (``excluded``); ``column_indices`` maps the result
    back to the input columns.  Non-convergence is reported through
    ``converged`` and the criterion history, not raised.
    """
    if config is None:
        config = DiConfig()
    n = data.n
    cap = int(math.floor(n * config.max_col_frac))

    miss_counts = data.mask.sum(axis=0)
    excluded = [
        (int(j), f"{int(miss_counts[j])} missing cells exceed the per-column budget of {cap}")
        for j in np.flatnonzero(miss_counts > cap)
    ]
    if excluded:
        names = ", ".join(data.columns[j] for j, _ in excluded)
        warnings.warn(f"setting aside columns with too many missing cells: {names}")
        kept = [j for j in range(data.d) if miss_counts[j] <= cap]
    else:
        kept = list(range(data.d))
    table = data.select(kept) if excluded else data
    d = table.d
    if d == 0:
        raise ShapeError("no usable columns remain")
    if n <= d:
        raise ShapeError(f"estimation needs more rows than columns (n={n}, d={d})")

    std, scaler = standardize(table)
    if isinstance(config.initial, str):
        start = initial_estimate(std, config.initial)
    else:
        mu0, sigma0 = config.initial
        mu0 = np.asarray(mu0, dtype=float).ravel()
        sigma0 = np.asarray(sigma0, dtype=float)
        if mu0.size == len(miss_counts) and excluded:
            mu0 = mu0[kept]
            sigma0 = sigma0[np.ix_(kept, kept)]
        start = initial_estimate(std, scaler.transform_model(mu0, sigma0))

    q = chi2_quantile(1, config.quantile)
    model = start
    history: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        flags = d_step(std, model, q, cap)
        new = i_step(std, flags, model)
        crit = float(
            np.sum((new.mu - model.mu) ** 2) + np.linalg.norm(new.sigma - model.sigma, "fro") ** 2
        )
        history.append(crit)
        model = new
        if crit < config.tol:
            converged = True
            break

    final = d_step(std, model, q, cap)
    mu_raw, sigma_raw = scaler.inverse_model(model.mu, model.sigma)
    flags_raw = FlagSet(
        row=final.row,
        col=final.col,
        imputed=scaler.locations[final.col] + scaler.scales[final.col] * final.imputed,
        criterion=final.criterion,
        residual=final.residual,
        missing=final.missing,
        shape=final.shape,
    )
    mu0_raw, sigma0_raw = scaler.inverse_model(start.mu, start.sigma)
    return DiResult(
        model=CovModel.from_moments(mu_raw, sigma_raw),
        flags=flags_raw,
        iterations=iterations,
        converged=converged,
        criterion_history=history,
        initial_model=CovModel.from_moments(mu0_raw, sigma0_raw),
        scaler=scaler,
        column_indices=np.asarray(kept, dtype=int),
        excluded=excluded,
    )
