"""Metrics and exact tabular oracles."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .calibration import BellmanTargets
from .calibrators import BinScheme, HistogramPartition, default_bin_count, make_partition
from .errors import LengthMismatch, SingularSystem
from .mdp import TabularMDP, atomic_write_text, stationary_distribution, tabular_value_solve

CSV_COLUMNS = ("n", "model", "method", "seed", "scaled_rmse", "cal_error")


@dataclass
class EvalReport:
    cal_error: float
    scaled_rmse: float
    per_iteration_diffs: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cal_error < 0 or self.scaled_rmse < 0:
            raise ValueError("errors must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def scaled_rmse(pred, truth, gamma: float) -> float:
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions vs {truth.shape[0]} truths")
    return float((1.0 - gamma) * np.sqrt(np.mean((pred - truth) ** 2)))


def estimate_cal_error(v, eval_data, nuis, pi, gamma: float, B_eval: int | None = None) -> float:
    """Plug-in Bellman calibration error.

    The calibration map is estimated by averaging DR targets of ``v`` within
    fresh equal-mass bins of ``v(S_i)``; the result is the root mean square of
    ``v(S_i)`` minus its bin average.
    """
    preds = v.predict(eval_data.states)
    tgt = BellmanTargets(eval_data, nuis, pi, gamma)(v, v.predict(eval_data.next_states))
    B = B_eval if B_eval is not None else default_bin_count(len(eval_data))
    part = make_partition(preds, B, BinScheme.EQUAL_MASS)
    cells = part.assign(preds)
    counts = np.bincount(cells, minlength=part.num_cells)
    sums = np.bincount(cells, weights=tgt, minlength=part.num_cells)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return float(np.sqrt(np.mean((preds - means[cells]) ** 2)))


def _bins_of(v_hat_values, partition: HistogramPartition):
    cells = partition.assign(np.asarray(v_hat_values, dtype=float))
    used, compact = np.unique(cells, return_inverse=True)
    return compact, used.size


def coarsened_kernel(mdp: TabularMDP, pi, v_hat_values, partition, state_weights=None):
    """Projection matrix onto bin-constant functions and the coarsened (P, r).

    Returns ``(proj, P_pi, r_pi, bins)`` where ``proj[s, u]`` is the weight of state
    ``u`` in the weighted average over the bin of ``s``.
    """
    weights = mdp.initial_distribution if state_weights is None else np.asarray(state_weights, dtype=float)
    bins, m = _bins_of(v_hat_values, partition)
    W = np.bincount(bins, weights=weights, minlength=m)
    if np.any(W <= 0):
        raise SingularSystem("a non-empty bin has zero state weight")
    member = (bins[:, None] == np.arange(m)[None, :]).astype(float)  # (S, m)
    proj = member @ (member * weights[:, None]).T / W[bins][:, None]
    P_pi, r_pi = mdp.policy_kernel(pi)
    return proj, P_pi, r_pi, bins


def coarsened_fixed_point_exact(
    mdp: TabularMDP, pi, v_hat_values, partition: HistogramPartition, state_weights=None
) -> np.ndarray:
    """Exact fixed point of the binned Bellman operator v = Pi_B (r_pi + gamma P_pi v).

    Bins group states by the cell of ``v_hat_values``; averages use
    ``state_weights`` (default: the initial/behavior state distribution).
    """
    weights = mdp.initial_distribution if state_weights is None else np.asarray(state_weights, dtype=float)
    bins, m = _bins_of(v_hat_values, partition)
    W = np.bincount(bins, weights=weights, minlength=m)
    if np.any(W <= 0):
        raise SingularSystem("a non-empty bin has zero state weight")
    P_pi, r_pi = mdp.policy_kernel(pi)
    member = np.zeros((mdp.num_states, m))
    member[np.arange(mdp.num_states), bins] = 1.0
    avg = (member * weights[:, None]).T / W[:, None]  # (m, S) bin averaging
    M = avg @ P_pi @ member
    c = avg @ r_pi
    A = np.eye(m) - mdp.discount * M
    try:
        theta = np.linalg.solve(A, c)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    return theta[bins]


def apply_coarsened_operator(mdp, pi, v_hat_values, partition, v, state_weights=None) -> np.ndarray:
    proj, P_pi, r_pi, _ = coarsened_kernel(mdp, pi, v_hat_values, partition, state_weights)
    return proj @ (r_pi + mdp.discount * P_pi @ np.asarray(v, dtype=float))


@dataclass
class Decomposition:
    applicable: bool
    total: float = float("nan")
    refinement: float = float("nan")
    calibration: float = float("nan")
    holds: bool | None = None


def _norm(f, stat):
    return float(np.sqrt(np.sum(stat * f**2)))


def decomposition_report(
    mdp: TabularMDP, pi, v_hat_values, partition: HistogramPartition, state_weights=None
) -> Decomposition:
    """Error split into refinement and calibration parts under the coarsened stationary measure."""
    v_hat = np.asarray(v_hat_values, dtype=float)
    proj, P_pi, _, _ = coarsened_kernel(mdp, pi, v_hat, partition, state_weights)
    stat = stationary_distribution(proj @ P_pi)
    if stat is None:
        return Decomposition(applicable=False)
    v0 = tabular_value_solve(mdp, pi)
    v0_hat = coarsened_fixed_point_exact(mdp, pi, v_hat, partition, state_weights)
    total = _norm(v_hat - v0, stat)
    refinement = _norm(proj @ v0 - v0, stat) / (1.0 - mdp.discount)
    calibration = _norm(v_hat - v0_hat, stat)
    return Decomposition(True, total, refinement, calibration, total <= refinement + calibration + 1e-9)


def singleton_partition(values) -> HistogramPartition:
    """One cell per distinct value."""
    u = np.unique(np.asarray(values, dtype=float))
    return HistogramPartition(u[:-1], BinScheme.EXPLICIT)


def results_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(
            [r["n"], r["model"], r["method"], r["seed"], f"{r['scaled_rmse']:.10g}", f"{r['cal_error']:.10g}"]
        )
    return buf.getvalue()


def write_results_csv(path, rows) -> None:
    atomic_write_text(path, results_to_csv(rows))
