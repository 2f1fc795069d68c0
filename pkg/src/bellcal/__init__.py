"""Calibrating offline value predictions with iterated Bellman calibration."""

__version__ = "0.1.0"

from .calibration import (
    BellmanTargets,
    CalibrationConfig,
    CalibrationResult,
    CalibratorClass,
    TargetKind,
    calibrate,
    dr_target,
    dr_targets,
    fit_base_estimator,
    fitted_value_iteration,
    hybrid_iso_hist,
    iterated_calibration,
)
from .calibrators import (
    BinScheme,
    HistogramPartition,
    PiecewiseConstant,
    evaluate_piecewise,
    fit_histogram,
    fit_isotonic_pava,
    flat_regions,
    make_partition,
)
from .config import ExperimentConfig
from .crm import CrmParams, CrmState, crm_step, monte_carlo_value, simulate_dataset
from .errors import (
    BellcalError,
    OverlapViolation,
    SolverFailure,
    SingularSystem,
    DimensionMismatch,
    LengthMismatch,
    NonpositiveWeight,
    NegativeWeight,
    NonfiniteTarget,
    TruncationTooLoose,
    StationaryNotFound,
    FoldError,
    InvalidDataset,
)
from .evaluation import (
    EvalReport,
    coarsened_fixed_point_exact,
    decomposition_report,
    estimate_cal_error,
    scaled_rmse,
)
from .mdp import (
    TabularMDP,
    TabularPolicy,
    Transition,
    TransitionDataset,
    bellman_apply,
    importance_ratio,
    policy_marginalize,
    tabular_value_solve,
)
from .nuisance import Fold, NuisanceMode, NuisanceModels, build_nuisance, clip_weights, split_by_customer
from .predictors import ValuePredictor
