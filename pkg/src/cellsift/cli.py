"""Command-line interface.

Commands: estimate (fit the robust model and report flagged cells), detect
(flag cells against a stored model), simulate (seeded contamination
benchmark), cellmap (grid data for cell maps), discrepancy (compare two
stored models), preprocess (log or centered-log-ratio transform).

Exit codes: 0 success, 2 input error, 3 shape or singularity error,
4 non-convergence.
"""

from __future__ import annotations

import argparse
import math
import sys
from datetime import datetime, timezone

import numpy as np

from .cellhandler import handle_row
from .errors import ConvergenceError, InputError, ShapeError, SingularityError
from .estimator import (
    ColumnScaler,
    DiConfig,
    _cell_list,
    clr_transform,
    d_step,
    di_estimate,
    robust_scales,
)
from .evalkit import (
    STREAM_MATRIX,
    STREAM_POSITIONS,
    STREAM_VALUES,
    ContaminationSpec,
    contaminate,
    discrepancy,
    discrepancy_symmetric,
    gen_a09,
    gen_randcorr,
    score_flags,
    substream,
)
from .model import CovModel
from .numkit import chi2_quantile
from .tableio import (
    DataTable,
    ReportRow,
    atomic_write,
    fmt_value,
    load_model,
    read_report,
    read_table,
    save_model,
    write_report,
    write_table,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_NOCONV = 4

_SVG_FILL = {"regular": "#f4d03f", "high": "#c0392b", "low": "#2e86c1", "missing": "#bdbdbd"}


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _report_comment(columns, quantile) -> str:
    return f"cellsift cell report: quantile={fmt_value(quantile)} columns={','.join(columns)}"


def _detection_rows(table: DataTable, mu, sigma, locations, scales, quantile, max_col=None):
    """Flag cells of ``table`` against a stored model; raw-unit report rows.

    With ``max_col`` set, the per-column cap walk is used (the estimation
    behaviour); otherwise every row is handled independently.  Rows are
    sorted by absolute residual descending, then (row, column).
    """
    scaler = ColumnScaler(locations=np.asarray(locations, float), scales=np.asarray(scales, float))
    std = DataTable(scaler.transform(table.values), list(table.columns))
    mu_std, sigma_std = scaler.transform_model(np.asarray(mu, float), np.asarray(sigma, float))
    model = CovModel.from_moments(mu_std, sigma_std)
    q = chi2_quantile(1, quantile)

    records = []
    if max_col is None:
        for i in range(std.n):
            det = handle_row(std.values[i], model, q)
            for j in det.flagged:
                records.append(
                    (i, int(j), det.imputed[j], det.criteria[j], det.residuals[j], bool(det.missing[j]))
                )
    else:
        flags = d_step(std, model, q, int(max_col))
        for i, j, imp, crit, res, miss in zip(
            flags.row, flags.col, flags.imputed, flags.criterion, flags.residual, flags.missing
        ):
            records.append((int(i), int(j), float(imp), float(crit), float(res), bool(miss)))

    col_pos = {name: j for j, name in enumerate(table.columns)}
    rows = [
        ReportRow(
            row=i,
            column=table.columns[j],
            observed=table.values[i, j],
            imputed=locations[j] + scales[j] * imp,
            residual=res,
            criterion=crit,
            missing=miss,
        )
        for (i, j, imp, crit, res, miss) in records
    ]
    rows.sort(key=lambda r: (-abs(r.residual), r.row, col_pos[r.column]))
    return rows


def cmd_estimate(args) -> int:
    table = read_table(args.input)
    loc, scale = robust_scales(table.values)
    usable = [j for j in range(table.d) if scale[j] > 0.0]
    dropped = [table.columns[j] for j in range(table.d) if scale[j] <= 0.0 or not np.isfinite(scale[j])]
    for name in dropped:
        _warn(f"dropping column {name!r}: zero or undefined scale")
    if dropped:
        table = table.select(usable)

    initial = args.initial
    if initial.startswith("model="):
        loaded = load_model(initial[len("model="):])
        if loaded.columns != table.columns:
            raise InputError(
                "initial model columns do not match the data columns: "
                f"{loaded.columns} vs {table.columns}"
            )
        initial_opt: object = (loaded.mu, loaded.sigma)
    elif initial in ("rank", "diagonal"):
        initial_opt = initial
    else:
        raise InputError(f"unknown --initial {initial!r}; use rank, diagonal or model=PATH")

    config = DiConfig(
        quantile=args.quantile,
        max_col_frac=args.maxcol,
        max_iter=args.max_iter,
        tol=args.tol,
        initial=initial_opt,
    )
    result = di_estimate(table, config)
    for j, reason in result.excluded:
        _warn(f"column {table.columns[j]!r} set aside: {reason}")

    columns = [table.columns[j] for j in result.column_indices]
    provenance = {
        "command": "estimate",
        "config": {
            "input": str(args.input),
            "quantile": args.quantile,
            "maxcol": args.maxcol,
            "max_iter": args.max_iter,
            "tol": args.tol,
            "initial": args.initial,
        },
        "iterations": result.iterations,
        "converged": result.converged,
        "criterion_history": [float(c) for c in result.criterion_history],
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    save_model(
        args.out_model,
        columns=columns,
        mu=result.model.mu,
        sigma=result.model.sigma,
        locations=result.scaler.locations,
        scales=result.scaler.scales,
        provenance=provenance,
    )

    kept = table.select(list(result.column_indices)) if len(result.column_indices) != table.d else table
    cap = int(math.floor(kept.n * args.maxcol))
    rows = _detection_rows(
        kept,
        result.model.mu,
        result.model.sigma,
        result.scaler.locations,
        result.scaler.scales,
        args.quantile,
        max_col=cap,
    )
    write_report(args.out_report, rows, comment=_report_comment(columns, args.quantile))

    history = " ".join(f"{c:.3e}" for c in result.criterion_history)
    print(f"model written to {args.out_model}")
    print(f"report written to {args.out_report} ({len(rows)} flagged cells)")
    print(
        f"iterations={result.iterations} converged={str(result.converged).lower()} "
        f"criterion history: {history}"
    )
    return EXIT_OK if result.converged else EXIT_NOCONV


def cmd_detect(args) -> int:
    loaded = load_model(args.model)
    table = read_table(args.input)
    missing = [c for c in loaded.columns if c not in table.columns]
    if missing:
        raise InputError(
            f"data is missing model columns: {', '.join(missing)} "
            f"(data has: {', '.join(table.columns)})"
        )
    extra = [c for c in table.columns if c not in loaded.columns]
    if extra:
        _warn(f"ignoring columns not in the model: {', '.join(extra)}")
    table = table.select([table.columns.index(c) for c in loaded.columns])

    quantile = args.quantile
    if quantile is None:
        quantile = float(loaded.provenance.get("config", {}).get("quantile", 0.99))
    rows = _detection_rows(
        table, loaded.mu, loaded.sigma, loaded.locations, loaded.scales, quantile
    )
    write_report(args.out, rows, comment=_report_comment(loaded.columns, quantile))
    print(f"report written to {args.out} ({len(rows)} flagged cells)")
    return EXIT_OK


def _simulate_lines(args) -> list[str]:
    if args.n <= args.d:
        raise ShapeError(f"simulation needs n > d (n={args.n}, d={args.d})")
    if args.reps < 1:
        raise InputError("--reps must be at least 1")
    config = DiConfig(
        quantile=args.quantile,
        max_col_frac=args.maxcol,
        max_iter=args.max_iter,
        tol=args.tol,
        initial=args.initial,
    )
    columns = [f"x{j + 1}" for j in range(args.d)]

    header = (
        f"cellsift simulate: model={args.model} d={args.d} n={args.n} "
        f"eps={fmt_value(args.eps)} gamma={fmt_value(args.gamma)} mode={args.mode} "
        f"row_frac={fmt_value(args.row_frac)} reps={args.reps} seed={args.seed} "
        f"quantile={fmt_value(args.quantile)} maxcol={fmt_value(args.maxcol)} "
        f"max_iter={args.max_iter} tol={fmt_value(args.tol)} initial={args.initial}"
    )
    lines = [f"# {header}", "rep,recall,precision,f_score,d_initial,d_di,iterations,converged"]

    recalls, precisions, fscores, d_inits, d_dis, iters, convs = [], [], [], [], [], [], []
    any_truth = False
    for rep in range(args.reps):
        if args.model == "a09":
            sigma = gen_a09(args.d)
        else:
            sigma = gen_randcorr(args.d, substream(args.seed, STREAM_MATRIX, rep))
        clean = substream(args.seed, STREAM_VALUES, rep).multivariate_normal(
            np.zeros(args.d), sigma, size=args.n, method="cholesky"
        )
        row_frac = args.row_frac if args.mode in ("row", "mixed") else 0.0
        spec = ContaminationSpec(
            epsilon=args.eps, gamma=args.gamma, mode=args.mode, row_frac=row_frac, seed=args.seed
        )
        corrupted, truth = contaminate(clean, sigma, spec, rng=substream(args.seed, STREAM_POSITIONS, rep))
        result = di_estimate(DataTable(corrupted, columns), config)
        d_init = discrepancy(result.initial_model.sigma, sigma)
        d_di = discrepancy(result.model.sigma, sigma)
        score = score_flags(result.flags.to_mask(), truth)
        has_truth = score.true_count > 0
        any_truth = any_truth or has_truth

        recalls.append(score.recall if has_truth else None)
        precisions.append(score.precision if has_truth else None)
        fscores.append(score.f_score if has_truth else None)
        d_inits.append(d_init)
        d_dis.append(d_di)
        iters.append(result.iterations)
        convs.append(1.0 if result.converged else 0.0)

        def cell(x):
            return "NA" if x is None else fmt_value(x)

        lines.append(
            f"{rep},{cell(recalls[-1])},{cell(precisions[-1])},{cell(fscores[-1])},"
            f"{fmt_value(d_init)},{fmt_value(d_di)},{result.iterations},"
            f"{'true' if result.converged else 'false'}"
        )

    def mean_or_na(values):
        kept = [v for v in values if v is not None]
        return "NA" if not kept else fmt_value(sum(kept) / len(kept))

    lines.append(
        f"mean,{mean_or_na(recalls)},{mean_or_na(precisions)},{mean_or_na(fscores)},"
        f"{fmt_value(float(np.mean(d_inits)))},{fmt_value(float(np.mean(d_dis)))},"
        f"{fmt_value(float(np.mean(iters)))},{fmt_value(float(np.mean(convs)))}"
    )
    return lines


def cmd_simulate(args) -> int:
    text = "\n".join(_simulate_lines(args)) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write(args.out, text)
        print(f"simulation table written to {args.out}")
    return EXIT_OK


def cmd_cellmap(args) -> int:
    if args.like:
        like = read_table(args.like)
        n_rows, columns = like.n, like.columns
    elif args.rows is not None and args.columns:
        n_rows = args.rows
        columns = [c.strip() for c in args.columns.split(",") if c.strip()]
    else:
        raise InputError("cellmap needs --like CSV, or both --rows and --columns")
    col_index = {name: j for j, name in enumerate(columns)}

    classes = np.full((n_rows, len(columns)), "regular", dtype=object)
    magnitude = np.zeros((n_rows, len(columns)))
    for entry in read_report(args.report):
        if entry.column not in col_index:
            raise InputError(f"report references unknown column {entry.column!r}")
        if not 0 <= entry.row < n_rows:
            raise InputError(f"report references row {entry.row}, grid has {n_rows} rows")
        j = col_index[entry.column]
        if entry.missing:
            classes[entry.row, j] = "missing"
        else:
            classes[entry.row, j] = "high" if entry.residual >= 0 else "low"
            magnitude[entry.row, j] = abs(entry.residual)

    lines = [f"# cellsift cellmap: rows={n_rows} columns={','.join(columns)}"]
    lines.append("row,column,class,magnitude")
    for i in range(n_rows):
        for j, name in enumerate(columns):
            lines.append(f"{i},{name},{classes[i, j]},{fmt_value(magnitude[i, j])}")
    atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"cellmap grid written to {args.out}")
    if args.svg:
        atomic_write(args.svg, _cellmap_svg(classes, magnitude, columns))
        print(f"cellmap image written to {args.svg}")
    return EXIT_OK


def _cellmap_svg(classes, magnitude, columns) -> str:
    cell = 18
    top, left = 90, 40
    n_rows, n_cols = classes.shape
    width = left + n_cols * cell + 10
    height = top + n_rows * cell + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        "<style>text{font:10px sans-serif}</style>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for j, name in enumerate(columns):
        x = left + j * cell + cell // 2
        parts.append(f'<text x="{x}" y="{top - 6}" transform="rotate(-60 {x} {top - 6})">{name}</text>')
    for i in range(n_rows):
        parts.append(f'<text x="{left - 28}" y="{top + i * cell + 13}">{i}</text>')
        for j in range(n_cols):
            fill = _SVG_FILL[classes[i, j]]
            opacity = 1.0
            if classes[i, j] in ("high", "low"):
                opacity = 0.35 + 0.65 * min(1.0, magnitude[i, j] / 5.15)
            parts.append(
                f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                f'fill="{fill}" fill-opacity="{opacity:.3f}" stroke="white"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_discrepancy(args) -> int:
    first = load_model(args.model_a, require_pd=False)
    second = load_model(args.model_b)
    if len(first.columns) != len(second.columns):
        raise InputError(
            f"dimension mismatch: {len(first.columns)} vs {len(second.columns)} columns"
        )
    if args.kind == "forward":
        value = discrepancy(first.sigma, second.sigma)
    else:
        value = discrepancy_symmetric(first.sigma, second.sigma, kind=args.kind)
    print(fmt_value(value))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    table = read_table(args.input)
    if args.clr:
        out = clr_transform(table)
        transform = "clr"
    else:
        values = table.values
        bad = (values <= 0.0) & ~np.isnan(values)
        if bad.any():
            raise InputError(
                "log transform needs positive values; offending cells: "
                + _cell_list(bad, table.columns)
            )
        with np.errstate(invalid="ignore"):
            out = DataTable(np.log(values), list(table.columns))
        transform = "log"
    write_table(args.out, out, comment=f"cellsift preprocess: transform={transform}")
    print(f"transformed table written to {args.out}")
    return EXIT_OK


def _add_estimator_flags(sub) -> None:
    sub.add_argument("--quantile", type=float, default=0.99, help="flagging quantile (default 0.99)")
    sub.add_argument("--maxcol", type=float, default=0.25, help="max flagged fraction per column")
    sub.add_argument("--max-iter", type=int, default=25, dest="max_iter")
    sub.add_argument("--tol", type=float, default=1e-6)
    sub.add_argument(
        "--initial", default="rank", help="initial estimate: rank, diagonal, or model=PATH"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellsift",
        description="Detect anomalous cells in numeric tables and estimate robust covariance.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit the robust model and report flagged cells")
    p.add_argument("input", help="input CSV (header row; NA or empty for missing)")
    p.add_argument("--out-model", default="model.json", dest="out_model")
    p.add_argument("--out-report", default="report.csv", dest="out_report")
    _add_estimator_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("detect", help="flag cells against a stored model")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--quantile", type=float, default=None, help="defaults to the model's setting")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("simulate", help="seeded contamination benchmark")
    p.add_argument("--model", choices=("a09", "randcorr"), default="a09")
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--eps", type=float, default=0.1, help="cell fraction per column")
    p.add_argument("--gamma", type=float, default=5.0)
    p.add_argument("--mode", choices=("cell", "row", "mixed"), default="cell")
    p.add_argument("--row-frac", type=float, default=0.1, dest="row_frac")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output CSV; stdout when omitted")
    _add_estimator_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cellmap", help="grid data (and optional SVG) for a cell map")
    p.add_argument("report", help="cell report CSV from estimate/detect")
    p.add_argument("--like", default=None, help="CSV whose shape and columns define the grid")
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--columns", default=None, help="comma-separated column names")
    p.add_argument("--out", default="cellmap.csv")
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_cellmap)

    p = sub.add_parser("discrepancy", help="compare the covariances of two stored models")
    p.add_argument("model_a")
    p.add_argument("model_b")
    p.add_argument("--kind", choices=("forward", "plus_inverse", "abs_log"), default="forward")
    p.set_defaults(func=cmd_discrepancy)

    p = sub.add_parser("preprocess", help="log or centered-log-ratio transform")
    p.add_argument("input")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--clr", action="store_true")
    group.add_argument("--log", action="store_true")
    p.add_argument("--out", default="preprocessed.csv")
    p.set_defaults(func=cmd_preprocess)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ShapeError, SingularityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    raise SystemExit(main())
