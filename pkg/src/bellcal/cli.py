"""Command line interface: ``bellcal <command> [options]``.

Exit codes: 0 success, 1 failed suite, failed seed or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibratorClass, calibrate, fit_base_estimator
from .config import METHODS, REGRESSORS, ConfigError, ExperimentConfig
from .crm import (
    STREAM_EVAL_DATA,
    CrmEnv,
    monte_carlo_value,
    sample_initial_states,
    simulate_dataset,
)
from .errors import BellcalError
from .evaluation import EvalReport, estimate_cal_error, scaled_rmse, write_results_csv
from .experiment import format_table, run_experiment, target_policy, thread_count
from .mdp import TransitionDataset, atomic_write_text
from .nuisance import build_nuisance, split_by_customer
from .oracles import SUITES, run_suite
from .predictors import ValuePredictor

log = logging.getLogger("bellcal")

_CAL_METHODS = {
    "isotonic": CalibratorClass.ISOTONIC,
    "histogram": CalibratorClass.HISTOGRAM_EQUAL_MASS,
    "histogram_equal_width": CalibratorClass.HISTOGRAM_EQUAL_WIDTH,
    "hybrid": CalibratorClass.HYBRID,
}


def _int_list(text: str) -> list[int]:
    """Parse ``1,2,5`` or ``1-10`` (or a mix)."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like '1,2,3' or '1-10', got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _str_list(choices):
    def parse(text: str) -> list[str]:
        items = [t.strip() for t in text.split(",") if t.strip()]
        bad = [t for t in items if t not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(choices)}")
        return items

    return parse


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# config assembly: flag > file > default


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(getattr(args, "config", None))
    seeds = getattr(args, "seeds", None)
    if getattr(args, "seed", None) is not None:
        seeds = [args.seed]
    cfg = cfg.override("data", n_cust=getattr(args, "n_cust", None), horizon=getattr(args, "horizon", None), seeds=seeds)
    if getattr(args, "unsafe_no_split", False):
        cfg = cfg.override("split", unsafe_no_split=True)
    regs = getattr(args, "regressor", None)
    cfg = cfg.override(
        "base",
        regressor=[regs] if isinstance(regs, str) else regs,
        iters=getattr(args, "iters", None),
        snapshot_at=getattr(args, "snapshots", None) or getattr(args, "snapshot_at", None),
    )
    cfg = cfg.override(
        "eval",
        n_rollouts=getattr(args, "n_rollouts", None),
        n_initial_states=getattr(args, "n_initial_states", None),
        methods=getattr(args, "methods", None),
    )
    cfg = cfg.override("nuisance", mode=getattr(args, "nuisance_mode", None))
    cfg = cfg.override("calibration", K=getattr(args, "K", None), B=getattr(args, "B", None))
    return cfg


def _split_and_nuisance(cfg: ExperimentConfig, data: TransitionDataset, seed: int):
    train, cal = split_by_customer(data, cfg.split.train_fraction, seed, cfg.split.unsafe_no_split)
    nuis = build_nuisance(train, cfg.nuisance.mode, cfg.nuisance.regressor, cfg.nuisance.weight_clip)
    return train, cal, nuis


def _load_model(path) -> tuple[ValuePredictor, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read model {path}: {exc.strerror}") from exc
    return ValuePredictor.from_dict(d), d.get("config", {})


def _model_config(meta: dict, args) -> ExperimentConfig:
    """Experiment config stored with a model, with command-line flags layered on top."""
    cfg = ExperimentConfig.from_dict(meta.get("experiment"))
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    return cfg


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    seed = cfg.data.seeds[0]
    data = simulate_dataset(cfg.crm, cfg.data.n_cust, cfg.data.horizon, seed)
    data.save(args.out)
    churn = float(np.sum(data.dones)) / cfg.data.n_cust
    print(f"wrote {len(data)} transitions ({cfg.data.n_cust} customers, seed {seed}) to {args.out}")
    print(f"churn rate within horizon: {churn:.3f}")
    return 0


def cmd_fit_base(args) -> int:
    cfg = load_config(args)
    data = TransitionDataset.load(args.data)
    seed = cfg.data.seeds[0]
    train, _, nuis = _split_and_nuisance(cfg, data, seed)
    reg = cfg.base.regressor[0]
    snap = cfg.base.snapshot_at[0] if cfg.base.snapshot_at else None
    v = fit_base_estimator(train, nuis, target_policy(cfg), cfg.gamma, reg, cfg.base.iters, snap)
    meta = {"experiment": cfg.to_dict(), "split_seed": seed, "regressor": reg, "snapshot_at": snap}
    _write_json(args.out, v.to_dict(meta))
    print(f"fitted {reg} base model on {len(train)} training transitions; wrote {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    base, meta = _load_model(args.model)
    cfg = _model_config(meta, args)
    cfg = cfg.override("calibration", K=args.K, B=args.B, calibrator_class=_CAL_METHODS[args.method])
    data = TransitionDataset.load(args.data)
    seed = int(meta.get("split_seed", cfg.data.seeds[0]))
    _, cal, nuis = _split_and_nuisance(cfg, data, seed)
    res = calibrate(base, cal, nuis, target_policy(cfg), cfg.gamma, cfg.calibration)
    meta = {**meta, "calibration": cfg.calibration.to_dict(), "diagnostics": res.diagnostics.summary()}
    _write_json(args.out, res.predictor.to_dict(meta))
    diffs = res.diagnostics.successive_diffs
    print(
        f"{args.method}: {res.diagnostics.iterations_run} iterations on {len(cal)} transitions, "
        f"{res.calibrator.num_cells} cells, last successive diff {diffs[-1]:.3g}; wrote {args.out}"
    )
    return 0


def cmd_evaluate(args) -> int:
    v, meta = _load_model(args.model)
    cfg = _model_config(meta, args)
    cfg = cfg.override("eval", n_rollouts=args.n_rollouts, n_initial_states=args.n_initial_states)
    seed = int(meta.get("split_seed", cfg.data.seeds[0])) if args.seed is None else args.seed
    data = TransitionDataset.load(args.data)
    _, _, nuis = _split_and_nuisance(cfg, data, seed)
    pi = target_policy(cfg)
    S0 = sample_initial_states(cfg.crm, cfg.eval.n_initial_states, seed)
    mc = monte_carlo_value(CrmEnv(cfg.crm), pi, S0, cfg.gamma, cfg.eval.n_rollouts, cfg.eval.horizon_eff, seed)
    eval_data = simulate_dataset(cfg.crm, cfg.eval.n_eval_cust, cfg.data.horizon, seed, stream=STREAM_EVAL_DATA)
    report = EvalReport(
        cal_error=estimate_cal_error(v, eval_data, nuis, pi, cfg.gamma, cfg.eval.B_eval),
        scaled_rmse=scaled_rmse(v.predict(S0), mc.values, cfg.gamma),
        per_iteration_diffs=list(meta.get("diagnostics", {}).get("successive_diffs", [])),
        seeds=[seed],
        metadata={"model": str(args.model), "eval": cfg.to_dict()["eval"]},
    )
    text = report.to_json()
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args)
    threads = args.threads if args.threads is not None else thread_count()
    res = run_experiment(cfg, threads)
    write_results_csv(args.out, res.rows)
    print(f"wrote {len(res.rows)} rows to {args.out}")
    if res.rows:
        print(format_table(res.rows, "scaled_rmse"))
        print(format_table(res.rows, "cal_error"))
    for seed, msg in res.failures:
        print(f"seed {seed} failed: {msg}", file=sys.stderr)
    return 1 if res.failures else 0


def cmd_oracle(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    ok = True
    for name in names:
        rep = run_suite(name)
        print(("PASS " if rep.passed else "FAIL ") + rep.summary())
        for seed, msg in rep.failures[:20]:
            print(f"  seed {seed}: {msg}")
        ok &= rep.passed
    return 0 if ok else 1


# --------------------------------------------------------------------------


def _add_data_flags(p):
    p.add_argument("--config", help="JSON config with sections crm, data, split, base, calibration, nuisance, eval")
    p.add_argument("--seed", type=int, help="single seed (overrides data.seeds)")
    p.add_argument("--n-cust", type=int, dest="n_cust")
    p.add_argument("--horizon", type=int)
    p.add_argument("--unsafe-no-split", action="store_true", help="fit and calibrate on the same data (no guarantees)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bellcal", description="Iterated Bellman calibration toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a CRM dataset to JSONL")
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-base", help="fit nuisances and a base value model on the training fold")
    _add_data_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--regressor", choices=REGRESSORS)
    p.add_argument("--iters", type=int)
    p.add_argument("--snapshot-at", type=int, dest="snapshot_at")
    p.add_argument("--nuisance-mode", dest="nuisance_mode", choices=["exact_weights", "estimated_weights", "iw_only"])
    p.set_defaults(func=cmd_fit_base)

    p = sub.add_parser("calibrate", help="Bellman-calibrate a base model on the calibration fold")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=sorted(_CAL_METHODS), default="hybrid")
    p.add_argument("--K", type=int)
    p.add_argument("--B", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="scaled RMSE against Monte Carlo truth and plug-in calibration error")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset whose training fold supplies the nuisances")
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-rollouts", type=int, dest="n_rollouts")
    p.add_argument("--n-initial-states", type=int, dest="n_initial_states")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="multi-seed experiment matrix to CSV")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_int_list, help="e.g. 1-10 or 1,2,3")
    p.add_argument("--n-cust", type=int, dest="n_cust")
    p.add_argument("--horizon", type=int)
    p.add_argument("--regressor", type=_str_list(REGRESSORS), help="comma-separated base regressors")
    p.add_argument("--iters", type=int)
    p.add_argument("--snapshots", type=_int_list, help="snapshot iterations, e.g. 2,5,10,25")
    p.add_argument("--methods", type=_str_list(METHODS))
    p.add_argument("--n-rollouts", type=int, dest="n_rollouts")
    p.add_argument("--n-initial-states", type=int, dest="n_initial_states")
    p.add_argument("--threads", type=int, help="parallel seeds (default: BELLCAL_THREADS or 1)")
    p.add_argument("--unsafe-no-split", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("oracle", help="run a deterministic brute-force check suite")
    p.add_argument("suite", choices=SUITES + ("all",))
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bellcal: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, BellcalError, ValueError, KeyError) as exc:
        print(f"bellcal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
