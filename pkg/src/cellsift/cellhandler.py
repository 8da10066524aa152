"""Per-row detection: criterion values, flags, imputations, residuals.

The entry path of a row yields one residual drop per step.  Each cell's
criterion is the largest drop at or after its own entry step, which makes the
criterion sequence nonincreasing along the path: the cells flagged by any
cutoff always form a prefix of the path.  Flagged cells are replaced by their
joint conditional expectation given the unflagged cells, read directly off
the stored active-set fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .larpath import LarPath, build_design, huber_weights, lar_trace
from .model import CovModel
from .numkit import chi2_quantile

DEFAULT_QUANTILE = 0.99


def criterion_values(path: LarPath) -> np.ndarray:
    """Per-cell criterion: suffix maximum of the drops along the path.

    Returned in cell coordinates.  Forced cells get ``+inf`` so they are
    always retained by any finite cutoff.
    """
    suffix_max = np.maximum.accumulate(path.drops[::-1])[::-1]
    crit = np.empty(path.dim)
    crit[path.order] = suffix_max
    crit[path.order[: path.forced_count]] = np.inf
    return crit


@dataclass(frozen=True)
class RowDetection:
    """Flags, imputations and standardized residuals for one row.

    ``flagged`` lists cell indices in path order (a prefix of ``path_order``).
    ``imputed`` is the full row with flagged and missing cells replaced by
    their conditional expectation; unflagged cells keep their observed value.
    Residuals are ``sign(observed - imputed) * sqrt(criterion)`` on flagged
    observed cells and zero elsewhere (missing cells included).
    """

    criteria: np.ndarray
    flagged: np.ndarray
    imputed: np.ndarray
    residuals: np.ndarray
    path_order: np.ndarray
    missing: np.ndarray


def trace_row(z, model: CovModel):
    """Run weighting, whitening and the entry path for one row.

    Returns ``(path, criteria, filled, missing)`` where ``filled`` is the row
    with missing cells replaced by the model location (these are forced to
    the front of the path).
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (model.dim,):
        raise InputError(f"row has shape {z.shape}, expected ({model.dim},)")
    missing = np.isnan(z)
    filled = np.where(missing, model.mu, z)
    weights = huber_weights(z, model.mu, np.diag(model.sigma))
    pair = build_design(filled, model.mu, model.inv_root, weights)
    path = lar_trace(pair, forced=np.flatnonzero(missing))
    return path, criterion_values(path), filled, missing


def resolve_prefix(path: LarPath, criteria, filled, missing, count: int) -> RowDetection:
    """Materialize flags/imputations/residuals for a given path prefix length."""
    cells = path.order[:count].copy()
    fit = path.fit_at(count)
    imputed = filled.copy()
    imputed[cells] = filled[cells] - fit[cells]
    residuals = np.zeros(filled.size)
    observed = cells[~missing[cells]]
    residuals[observed] = np.sign(fit[observed]) * np.sqrt(criteria[observed])
    return RowDetection(
        criteria=criteria,
        flagged=cells,
        imputed=imputed,
        residuals=residuals,
        path_order=path.order.copy(),
        missing=missing,
    )


def handle_row(z, model: CovModel, q: float | None = None) -> RowDetection:
    """Flag the cells of one row whose criterion exceeds the cutoff ``q``.

    ``q`` defaults to the 0.99 quantile of chi-square with one degree of
    freedom.  Cells exactly at the cutoff are not flagged.  Missing cells are
    always flagged (criterion ``+inf``) and reported with residual zero.
    """
    if q is None:
        q = chi2_quantile(1, DEFAULT_QUANTILE)
    if not q > 0.0:
        raise InputError(f"cutoff must be positive, got {q!r}")
    path, criteria, filled, missing = trace_row(z, model)
    count = int(np.count_nonzero(criteria > q))
    # nonincreasing criteria along the path make the flagged set a prefix
    assert np.all(criteria[path.order[:count]] > q)
    return resolve_prefix(path, criteria, filled, missing, count)


def flag_domain_scan(model: CovModel, grid, q: float) -> list[tuple[float, float, str]]:
    """Label which cells get flagged on a square grid of bivariate points.

    ``grid`` is ``(low, high, num)`` applied to both coordinates.  Each output
    record is ``(z1, z2, label)`` with label in ``{"none", "first", "second",
    "both"}``.  Intended as plot data for inspecting flagging domains.
    """
    if model.dim != 2:
        raise InputError("domain scan requires a bivariate model")
    low, high, num = grid
    axis = np.linspace(float(low), float(high), int(num))
    labels = {frozenset(): "none", frozenset({0}): "first", frozenset({1}): "second", frozenset({0, 1}): "both"}
    out = []
    for z1 in axis:
        for z2 in axis:
            det = handle_row(np.array([z1, z2]), model, q)
            out.append((float(z1), float(z2), labels[frozenset(det.flagged.tolist())]))
    return out
