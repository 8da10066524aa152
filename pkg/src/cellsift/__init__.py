"""Cellwise anomaly detection and robust covariance estimation for numeric tables.

Given a location/covariance model, individual suspicious cells of a row are
ranked by how much moving them would reduce the row's Mahalanobis distance,
then flagged against chi-square cutoffs and replaced by their conditional
expectation.  When the model is unknown, it is estimated robustly by
alternating that detection step with an EM-style moment update.  The package
also ships the scatter-matrix discrepancy measures, contamination generators
and scoring used to benchmark such estimators, plus a CLI (``cellsift``).
"""

from .cellhandler import (
    DEFAULT_QUANTILE,
    RowDetection,
    criterion_values,
    flag_domain_scan,
    handle_row,
    trace_row,
)
from .errors import (
    CellsiftError,
    ConvergenceError,
    InputError,
    ShapeError,
    SingularityError,
)
from .estimator import (
    ColumnScaler,
    DiConfig,
    DiResult,
    FlagSet,
    clr_transform,
    d_step,
    di_estimate,
    i_step,
    initial_estimate,
    standardize,
)
from .evalkit import (
    ContaminationSpec,
    ScoreReport,
    contaminate,
    contaminate_cellwise,
    contaminate_rowwise,
    discrepancy,
    discrepancy_symmetric,
    gen_a09,
    gen_randcorr,
    kl_gaussian,
    score_flags,
    substream,
)
from .larpath import DesignPair, LarPath, build_design, huber_weights, lar_trace
from .model import CovModel
from .numkit import (
    EigenDecomposition,
    chi2_cdf,
    chi2_quantile,
    mahalanobis2,
    nearest_psd,
    pd_inverse_sqrt,
    sym_eigen,
)
from .tableio import DataTable, read_table, write_table

__version__ = "0.1.0"

__all__ = [
    "CellsiftError",
    "ColumnScaler",
    "ContaminationSpec",
    "ConvergenceError",
    "CovModel",
    "DEFAULT_QUANTILE",
    "DataTable",
    "DesignPair",
    "DiConfig",
    "DiResult",
    "EigenDecomposition",
    "FlagSet",
    "InputError",
    "LarPath",
    "RowDetection",
    "ScoreReport",
    "ShapeError",
    "SingularityError",
    "build_design",
    "chi2_cdf",
    "chi2_quantile",
    "clr_transform",
    "contaminate",
    "contaminate_cellwise",
    "contaminate_rowwise",
    "criterion_values",
    "d_step",
    "di_estimate",
    "discrepancy",
    "discrepancy_symmetric",
    "flag_domain_scan",
    "gen_a09",
    "gen_randcorr",
    "handle_row",
    "huber_weights",
    "i_step",
    "initial_estimate",
    "kl_gaussian",
    "lar_trace",
    "mahalanobis2",
    "nearest_psd",
    "pd_inverse_sqrt",
    "read_table",
    "score_flags",
    "standardize",
    "substream",
    "sym_eigen",
    "trace_row",
    "write_table",
]
