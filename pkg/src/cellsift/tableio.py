"""Numeric tables with missing cells, plus CSV / model-file persistence.

CSV conventions: comma separated, required header row, ``NA`` or an empty
field for a missing cell, dot decimal separator regardless of locale.  Lines
starting with ``#`` are provenance comments and are skipped on read.  All
writes are whole-file atomic (write to a temporary file, then rename).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, SingularityError
from .numkit import PD_FLOOR_REL

NA_TOKENS = frozenset({"", "NA"})
MODEL_SCHEMA = "cellsift-model/1"
REPORT_FIELDS = ("row", "column", "observed", "imputed", "residual", "criterion", "missing")


@dataclass
class DataTable:
    """An n x d float table; missing cells are NaN."""

    values: np.ndarray
    columns: list[str]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InputError(f"table values must be 2-D, got shape {self.values.shape}")
        self.columns = [str(c) for c in self.columns]
        if len(self.columns) != self.values.shape[1]:
            raise InputError(
                f"{len(self.columns)} column names for {self.values.shape[1]} columns"
            )

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Boolean missingness mask."""
        return np.isnan(self.values)

    def select(self, indices) -> "DataTable":
        indices = list(indices)
        return DataTable(self.values[:, indices].copy(), [self.columns[i] for i in indices])


def fmt_value(x) -> str:
    """Shortest round-trip decimal for a float; NA for NaN, inf unsigned."""
    x = float(x)
    if math.isnan(x):
        return "NA"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def read_table(path) -> DataTable:
    """Parse a CSV file into a DataTable."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise InputError(f"{path}: no header row")
    header = [name.strip() for name in rows[0]]
    if any(not name for name in header):
        raise InputError(f"{path}: empty column name in header")
    d = len(header)
    values = np.empty((len(rows) - 1, d))
    for r, row in enumerate(rows[1:]):
        if len(row) != d:
            raise InputError(f"{path}: row {r} has {len(row)} fields, expected {d}")
        for c, token in enumerate(row):
            token = token.strip()
            if token in NA_TOKENS:
                values[r, c] = np.nan
            else:
                try:
                    values[r, c] = float(token)
                except ValueError as exc:
                    raise InputError(
                        f"{path}: row {r}, column {header[c]!r}: not a number: {token!r}"
                    ) from exc
    return DataTable(values, header)


def write_table(path, table: DataTable, comment: str | None = None) -> None:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.values:
        writer.writerow([fmt_value(x) for x in row])
    atomic_write(path, buf.getvalue())


def save_model(path, *, columns, mu, sigma, locations, scales, provenance) -> None:
    """Persist a fitted model as versioned JSON (row-major covariance)."""
    doc = {
        "schema": MODEL_SCHEMA,
        "columns": list(columns),
        "mu": [float(x) for x in np.asarray(mu).ravel()],
        "sigma": [[float(x) for x in row] for row in np.asarray(sigma)],
        "scaler": {
            "locations": [float(x) for x in np.asarray(locations).ravel()],
            "scales": [float(x) for x in np.asarray(scales).ravel()],
        },
        "provenance": provenance,
    }
    atomic_write(path, json.dumps(doc, indent=2, allow_nan=False) + "\n")


@dataclass
class LoadedModel:
    columns: list[str]
    mu: np.ndarray
    sigma: np.ndarray
    locations: np.ndarray
    scales: np.ndarray
    provenance: dict = field(default_factory=dict)


def load_model(path, require_pd: bool = True) -> LoadedModel:
    """Load and validate a model file written by :func:`save_model`."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc
    if doc.get("schema") != MODEL_SCHEMA:
        raise InputError(f"{path}: unsupported schema {doc.get('schema')!r}")
    try:
        columns = [str(c) for c in doc["columns"]]
        mu = np.asarray(doc["mu"], dtype=float)
        sigma = np.asarray(doc["sigma"], dtype=float)
        locations = np.asarray(doc["scaler"]["locations"], dtype=float)
        scales = np.asarray(doc["scaler"]["scales"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed model file: {exc}") from exc
    d = len(columns)
    if mu.shape != (d,) or sigma.shape != (d, d) or locations.shape != (d,) or scales.shape != (d,):
        raise InputError(f"{path}: model dimensions do not agree with {d} column names")
    if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
        raise InputError(f"{path}: non-finite model entries")
    scale_ref = np.max(np.abs(sigma)) or 1.0
    if np.max(np.abs(sigma - sigma.T)) > 1e-8 * scale_ref:
        raise InputError(f"{path}: covariance is not symmetric")
    sigma = 0.5 * (sigma + sigma.T)
    if require_pd:
        vals = np.linalg.eigvalsh(sigma)
        if vals[0] <= PD_FLOOR_REL * max(vals[-1], 0.0):
            raise SingularityError(
                f"{path}: covariance is not positive definite (min eigenvalue {vals[0]:.3e})"
            )
    if not np.all(scales > 0.0):
        raise InputError(f"{path}: scaler has nonpositive scales")
    return LoadedModel(
        columns=columns,
        mu=mu,
        sigma=sigma,
        locations=locations,
        scales=scales,
        provenance=doc.get("provenance", {}),
    )


@dataclass
class ReportRow:
    row: int
    column: str
    observed: float
    imputed: float
    residual: float
    criterion: float
    missing: bool


def write_report(path, rows: list[ReportRow], comment: str | None = None) -> None:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in rows:
        writer.writerow(
            [
                str(r.row),
                r.column,
                fmt_value(r.observed),
                fmt_value(r.imputed),
                fmt_value(r.residual),
                fmt_value(r.criterion),
                "true" if r.missing else "false",
            ]
        )
    atomic_write(path, buf.getvalue())


def read_report(path) -> list[ReportRow]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or tuple(rows[0]) != REPORT_FIELDS:
        raise InputError(f"{path}: not a cell report (unexpected header)")

    def number(token: str) -> float:
        token = token.strip()
        if token in NA_TOKENS:
            return math.nan
        return float(token)

    out = []
    for row in rows[1:]:
        if len(row) != len(REPORT_FIELDS):
            raise InputError(f"{path}: malformed report row: {row!r}")
        out.append(
            ReportRow(
                row=int(row[0]),
                column=row[1],
                observed=number(row[2]),
                imputed=number(row[3]),
                residual=number(row[4]),
                criterion=number(row[5]),
                missing=row[6].strip() == "true",
            )
        )
    return out
