"""Iterated Bellman calibration: doubly robust targets, histogram/isotonic/hybrid calibrators,
and fitted value iteration for base estimators."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .calibrators import (
    BinScheme,
    HistogramPartition,
    PiecewiseConstant,
    default_bin_count,
    fit_histogram,
    fit_isotonic_pava,
    flat_regions,
    make_partition,
)
from .errors import FoldError, NonfiniteTarget
from .mdp import Policy, Transition, TransitionDataset
from .nuisance import Fold, NuisanceMode, NuisanceModels, require_train
from .predictors import ConstantValue, RegressionValue, ValuePredictor
from .regressors import RidgeSolver, fit_boosted_stumps


class CalibratorClass(str, Enum):
    HISTOGRAM_EQUAL_MASS = "histogram_equal_mass"
    HISTOGRAM_EQUAL_WIDTH = "histogram_equal_width"
    HISTOGRAM_EXPLICIT = "histogram_explicit"
    ISOTONIC = "isotonic"
    HYBRID = "hybrid"


class TargetKind(str, Enum):
    DOUBLY_ROBUST = "doubly_robust"
    IMPORTANCE_WEIGHTED = "importance_weighted"


@dataclass(frozen=True)
class CalibrationConfig:
    K: int | None = None
    calibrator_class: CalibratorClass = CalibratorClass.ISOTONIC
    B: int | None = None
    target_kind: TargetKind = TargetKind.DOUBLY_ROBUST
    flat_tol: float = 0.0
    early_stop_tol: float | None = None
    min_block_size: int | str | None = None

    def __post_init__(self):
        object.__setattr__(self, "calibrator_class", CalibratorClass(self.calibrator_class))
        object.__setattr__(self, "target_kind", TargetKind(self.target_kind))
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")
        if self.B is not None and self.B < 1:
            raise ValueError("B must be >= 1")
        if self.flat_tol < 0:
            raise ValueError("flat_tol must be >= 0")
        if self.min_block_size not in (None, "auto") and (
            not isinstance(self.min_block_size, int) or self.min_block_size < 1
        ):
            raise ValueError("min_block_size must be a positive integer, 'auto' or None")

    def iterations(self, n: int) -> int:
        return self.K if self.K is not None else max(10, math.ceil(math.log(max(n, 1))))

    def bins(self, n: int) -> int:
        return self.B if self.B is not None else default_bin_count(n)

    def block_size(self, n: int) -> int | None:
        """Smallest isotonic block allowed; 'auto' means sqrt(n)."""
        if self.min_block_size == "auto":
            return math.ceil(math.sqrt(n))
        return self.min_block_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["calibrator_class"] = self.calibrator_class.value
        d["target_kind"] = self.target_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown calibration keys: {sorted(unknown)}")
        return cls(**d)


class BellmanTargets:
    """Doubly robust fitted Bellman targets on a fixed dataset.

    Everything that does not depend on the value function being plugged in
    (policy probabilities, clipped weights, reward model) is computed once.
    """

    def __init__(
        self,
        data: TransitionDataset,
        nuis: NuisanceModels,
        pi: Policy,
        gamma: float,
        target_kind: TargetKind | str = TargetKind.DOUBLY_ROBUST,
    ):
        self.data = data
        self.nuis = nuis
        self.gamma = float(gamma)
        self.k = data.num_actions
        self.idx = np.arange(len(data))
        self.pi_probs = np.asarray(pi.probs(data.states), dtype=float)
        self.w = nuis.weights(data, self.pi_probs)
        self.iw_only = TargetKind(target_kind) is TargetKind.IMPORTANCE_WEIGHTED or nuis.mode is NuisanceMode.IW_ONLY
        self.r_hat = None if self.iw_only else nuis.reward(data.states, self.k)
        self.wR = self.w * data.rewards

    def __call__(self, v, next_values: np.ndarray | None = None) -> np.ndarray:
        data = self.data
        vn = np.asarray(v(data.next_states) if next_values is None else next_values, dtype=float)
        vn = np.where(data.dones, 0.0, vn)
        if self.iw_only:
            tgt = self.wR + self.gamma * self.w * vn
        else:
            q_hat = self.r_hat + self.gamma * self.nuis.next_value(v, data.states, self.k)
            tgt = (
                np.einsum("ij,ij->i", self.pi_probs, q_hat)
                + self.wR
                + self.w * (self.gamma * vn - q_hat[self.idx, data.actions])
            )
        if not np.all(np.isfinite(tgt)):
            raise NonfiniteTarget(f"{int(np.sum(~np.isfinite(tgt)))} non-finite Bellman targets")
        return tgt


def dr_targets(data, v, nuis, pi, gamma, target_kind=TargetKind.DOUBLY_ROBUST) -> np.ndarray:
    return BellmanTargets(data, nuis, pi, gamma, target_kind)(v)


def dr_target(tr: Transition, v, nuis: NuisanceModels, pi: Policy, gamma: float, bp=None) -> float:
    """Single-transition DR target; ``bp`` supplies behavior probabilities in exact-weights mode."""
    k = getattr(pi, "num_actions")
    data = TransitionDataset(
        tr.state[None, :],
        [tr.action],
        [tr.reward],
        tr.next_state[None, :],
        [tr.done],
        num_actions=k,
        bp=None if bp is None else np.asarray(bp, dtype=float)[None, :],
    )
    return float(dr_targets(data, v, nuis, pi, gamma)[0])


def compose(theta: PiecewiseConstant, inner: PiecewiseConstant | None) -> PiecewiseConstant:
    """theta o inner expressed as a single step function of inner's input."""
    if inner is None:
        return theta
    return PiecewiseConstant(inner.breakpoints, theta(inner.levels))


@dataclass
class CalibrationDiagnostics:
    successive_diffs: list = field(default_factory=list)
    cells_per_iteration: list = field(default_factory=list)
    iterations_run: int = 0
    final_targets: np.ndarray | None = None
    x: np.ndarray | None = None
    partition: HistogramPartition | None = None
    stage1_blocks: int | None = None

    def summary(self) -> dict:
        return {
            "successive_diffs": [float(d) for d in self.successive_diffs],
            "cells_per_iteration": [int(c) for c in self.cells_per_iteration],
            "iterations_run": self.iterations_run,
            "stage1_blocks": self.stage1_blocks,
        }


@dataclass
class CalibrationResult:
    predictor: ValuePredictor
    calibrator: PiecewiseConstant
    diagnostics: CalibrationDiagnostics


def _calibration_data(cal) -> TransitionDataset:
    if isinstance(cal, Fold):
        if cal.tag != "calibration":
            raise FoldError("calibration must run on a fold tagged 'calibration'")
        return cal.data
    return cal


def iterated_calibration(
    v_hat: ValuePredictor,
    cal,
    nuis: NuisanceModels,
    pi: Policy,
    gamma: float,
    cfg: CalibrationConfig = CalibrationConfig(),
    partition: HistogramPartition | None = None,
) -> CalibrationResult:
    """Repeatedly regress Bellman targets of the current iterate onto the original predictions.

    The regression inputs are always ``v_hat(S_i)``.  Histogram classes reuse
    one partition for every iteration; the isotonic class refits PAVA each time.
    """
    data = _calibration_data(cal)
    n = len(data)
    cls = cfg.calibrator_class
    if cls is CalibratorClass.HYBRID:
        return hybrid_iso_hist(v_hat, cal, nuis, pi, gamma, cfg)
    x = v_hat.predict(data.states)
    x_next = v_hat.predict(data.next_states)
    if cls is CalibratorClass.HISTOGRAM_EXPLICIT or partition is not None:
        if partition is None:
            raise ValueError("histogram_explicit needs a partition")
    elif cls is CalibratorClass.HISTOGRAM_EQUAL_MASS:
        partition = make_partition(x, cfg.bins(n), BinScheme.EQUAL_MASS)
    elif cls is CalibratorClass.HISTOGRAM_EQUAL_WIDTH:
        partition = make_partition(x, cfg.bins(n), BinScheme.EQUAL_WIDTH)

    make_targets = BellmanTargets(data, nuis, pi, gamma, cfg.target_kind)
    K = cfg.iterations(n)
    diag = CalibrationDiagnostics(x=x, partition=partition)
    theta: PiecewiseConstant | None = None
    current = x
    tgt = None
    for _ in range(K):
        if theta is None:
            vk, vn = v_hat, x_next
        else:
            vk = v_hat.with_calibrator(compose(theta, v_hat.calibrator))
            vn = theta(x_next)
        tgt = make_targets(vk, vn)
        if partition is None:
            theta = fit_isotonic_pava(x, tgt, min_block_size=cfg.block_size(n))
        else:
            theta = fit_histogram(x, tgt, partition)
        new = theta(x)
        diag.successive_diffs.append(float(np.sqrt(np.mean((new - current) ** 2))))
        diag.cells_per_iteration.append(theta.num_cells)
        diag.iterations_run += 1
        current = new
        if cfg.early_stop_tol is not None and diag.successive_diffs[-1] < cfg.early_stop_tol:
            break
    diag.final_targets = tgt
    final = compose(theta, v_hat.calibrator)
    return CalibrationResult(v_hat.with_calibrator(final), theta, diag)


def hybrid_iso_hist(
    v_hat: ValuePredictor,
    cal,
    nuis: NuisanceModels,
    pi: Policy,
    gamma: float,
    cfg: CalibrationConfig = CalibrationConfig(calibrator_class=CalibratorClass.HYBRID),
) -> CalibrationResult:
    """One isotonic pass picks the bins; histogram iterations then run on those fixed bins."""
    data = _calibration_data(cal)
    x = v_hat.predict(data.states)
    chi0 = BellmanTargets(data, nuis, pi, gamma, cfg.target_kind)(v_hat, v_hat.predict(data.next_states))
    theta_iso = fit_isotonic_pava(x, chi0, min_block_size=cfg.block_size(len(data)))
    partition = flat_regions(theta_iso, x, cfg.flat_tol)
    stage2 = CalibrationConfig(
        K=cfg.K,
        calibrator_class=CalibratorClass.HISTOGRAM_EXPLICIT,
        target_kind=cfg.target_kind,
        early_stop_tol=cfg.early_stop_tol,
    )
    res = iterated_calibration(v_hat, cal, nuis, pi, gamma, stage2, partition=partition)
    res.diagnostics.stage1_blocks = theta_iso.num_cells
    return res


def calibrate(v_hat, cal, nuis, pi, gamma, cfg: CalibrationConfig) -> CalibrationResult:
    if cfg.calibrator_class is CalibratorClass.HYBRID:
        return hybrid_iso_hist(v_hat, cal, nuis, pi, gamma, cfg)
    return iterated_calibration(v_hat, cal, nuis, pi, gamma, cfg)


def fitted_value_iteration(
    train: Fold,
    nuis: NuisanceModels,
    pi: Policy,
    gamma: float,
    regressor: str = "linear_ridge",
    iters: int = 50,
    snapshots=(),
) -> dict[int, ValuePredictor]:
    """Full-feature FVI from v=0 on DR targets; returns the iterates listed in ``snapshots`` plus the last."""
    data = require_train(train)
    targets = BellmanTargets(data, nuis, pi, gamma)
    solver = RidgeSolver(data.states) if regressor == "linear_ridge" else None
    if regressor not in ("linear_ridge", "boosted_stumps"):
        raise ValueError(f"unknown regressor {regressor!r}")
    wanted = {int(s) for s in snapshots if 0 < int(s) <= iters} | {iters}
    out: dict[int, ValuePredictor] = {}
    v = ValuePredictor(ConstantValue(0.0))
    for k in range(1, max(wanted) + 1):
        tgt = targets(v)
        model = solver.fit(tgt) if solver is not None else fit_boosted_stumps(data.states, tgt)
        v = ValuePredictor(RegressionValue(model))
        if k in wanted:
            out[k] = v
    return out


def fit_base_estimator(
    train: Fold,
    nuis: NuisanceModels,
    pi: Policy,
    gamma: float,
    regressor: str = "linear_ridge",
    iters: int = 50,
    snapshot_at: int | None = None,
) -> ValuePredictor:
    """Base value model by fitted value iteration; ``snapshot_at < iters`` returns an early iterate."""
    if snapshot_at is not None and snapshot_at < iters:
        return fitted_value_iteration(train, nuis, pi, gamma, regressor, snapshot_at)[snapshot_at]
    return fitted_value_iteration(train, nuis, pi, gamma, regressor, iters)[iters]
