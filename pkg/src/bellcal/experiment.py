"""Multi-seed CRM experiment: simulate, split, fit, calibrate, evaluate."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import CalibrationConfig, CalibratorClass, calibrate, fitted_value_iteration
from .config import ExperimentConfig
from .crm import (
    STREAM_EVAL_DATA,
    BehaviorPolicy,
    CrmEnv,
    TargetPolicy,
    monte_carlo_value,
    sample_initial_states,
    simulate_dataset,
)
from .evaluation import estimate_cal_error, scaled_rmse
from .nuisance import build_nuisance, split_by_customer

log = logging.getLogger(__name__)

_METHOD_CLASS = {
    "isotonic": CalibratorClass.ISOTONIC,
    "histogram": CalibratorClass.HISTOGRAM_EQUAL_MASS,
    "hybrid": CalibratorClass.HYBRID,
}


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("BELLCAL_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer BELLCAL_THREADS=%r", raw)
        return default


def target_policy(cfg: ExperimentConfig):
    return TargetPolicy(cfg.crm) if cfg.eval.policy == "target" else BehaviorPolicy(cfg.crm)


@dataclass
class SeedArtifacts:
    """Everything one seed produces before the per-method evaluation loop."""

    seed: int
    train: object
    cal: object
    nuis: object
    bases: dict  # label -> ValuePredictor
    eval_states: np.ndarray
    truth: np.ndarray
    eval_data: object


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedArtifacts:
    pi = target_policy(cfg)
    data = simulate_dataset(cfg.crm, cfg.data.n_cust, cfg.data.horizon, seed)
    train, cal = split_by_customer(data, cfg.split.train_fraction, seed, cfg.split.unsafe_no_split)
    nuis = build_nuisance(train, cfg.nuisance.mode, cfg.nuisance.regressor, cfg.nuisance.weight_clip)
    bases = {}
    for reg in cfg.base.regressor:
        wanted = [m for m in cfg.base.models() if m[1] == reg]
        iterates = fitted_value_iteration(
            train, nuis, pi, cfg.gamma, reg, max(k for _, _, k in wanted), [k for _, _, k in wanted]
        )
        for label, _, k in wanted:
            bases[label] = iterates[k]
    S0 = sample_initial_states(cfg.crm, cfg.eval.n_initial_states, seed)
    mc = monte_carlo_value(CrmEnv(cfg.crm), pi, S0, cfg.gamma, cfg.eval.n_rollouts, cfg.eval.horizon_eff, seed)
    eval_data = simulate_dataset(cfg.crm, cfg.eval.n_eval_cust, cfg.data.horizon, seed, stream=STREAM_EVAL_DATA)
    return SeedArtifacts(seed, train, cal, nuis, bases, S0, mc.values, eval_data)


def run_seed(cfg: ExperimentConfig, seed: int) -> list[dict]:
    """Rows ``{n, model, method, seed, scaled_rmse, cal_error}`` for one seed."""
    art = prepare_seed(cfg, seed)
    pi = target_policy(cfg)
    rows = []
    for label, base in art.bases.items():
        for method in cfg.eval.methods:
            if method == "raw":
                v = base
            else:
                ccfg = replace(cfg.calibration, calibrator_class=_METHOD_CLASS[method])
                v = calibrate(base, art.cal, art.nuis, pi, cfg.gamma, ccfg).predictor
            rows.append(
                {
                    "n": cfg.data.n_cust,
                    "model": label,
                    "method": method,
                    "seed": seed,
                    "scaled_rmse": scaled_rmse(v.predict(art.eval_states), art.truth, cfg.gamma),
                    "cal_error": estimate_cal_error(v, art.eval_data, art.nuis, pi, cfg.gamma, cfg.eval.B_eval),
                }
            )
    return rows


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (seed, message)


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> ExperimentResult:
    """Run every seed; a failing seed is logged and skipped. Row order is independent of threading."""
    threads = thread_count() if threads is None else threads

    def one(seed):
        try:
            return seed, run_seed(cfg, seed), None
        except Exception as exc:  # isolate per-seed failures
            log.error("seed %d failed: %s: %s", seed, type(exc).__name__, exc)
            return seed, [], f"{type(exc).__name__}: {exc}"

    if threads > 1 and len(cfg.data.seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, cfg.data.seeds))
    else:
        outcomes = [one(s) for s in cfg.data.seeds]
    res = ExperimentResult()
    for seed, rows, err in sorted(outcomes, key=lambda o: o[0]):
        res.rows.extend(rows)
        if err is not None:
            res.failures.append((seed, err))
    return res


def summarize(rows) -> dict:
    """(n, model, method) -> {metric: (mean, sd, count)}."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["n"], r["model"], r["method"]), []).append(r)
    out = {}
    for key, rs in groups.items():
        stats = {}
        for metric in ("scaled_rmse", "cal_error"):
            x = np.array([r[metric] for r in rs], dtype=float)
            stats[metric] = (float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0, int(x.size))
        out[key] = stats
    return out


def format_table(rows, metric: str = "scaled_rmse") -> str:
    """Models as rows, methods as columns, cells ``mean ± sd``."""
    summary = summarize(rows)
    models = list(dict.fromkeys((k[0], k[1]) for k in summary))
    methods = list(dict.fromkeys(k[2] for k in summary))
    header = ["n", "model"] + methods
    body = []
    for n, model in models:
        cells = []
        for m in methods:
            s = summary.get((n, model, m))
            cells.append("-" if s is None else f"{s[metric][0]:.4f} ± {s[metric][1]:.4f}")
        body.append([str(n), model] + cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in [header] + body]
    return f"{metric}\n" + "\n".join(lines)
