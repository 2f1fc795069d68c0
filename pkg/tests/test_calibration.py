import json
from dataclasses import replace

import numpy as np
import pytest

from bellcal.calibration import (
    BellmanTargets,
    CalibrationConfig,
    CalibratorClass,
    compose,
    dr_target,
    fit_base_estimator,
    fitted_value_iteration,
    hybrid_iso_hist,
    iterated_calibration,
)
from bellcal.calibrators import PiecewiseConstant, fit_isotonic_pava, make_partition
from bellcal.crm import TargetPolicy
from bellcal.errors import FoldError, NonfiniteTarget
from bellcal.evaluation import estimate_cal_error, singleton_partition
from bellcal.mdp import (
    TabularPolicy,
    Transition,
    TransitionDataset,
    one_hot,
    random_policy_table,
    random_tabular_mdp,
    sample_tabular_dataset,
    tabular_value_solve,
)
from bellcal.nuisance import Fold, NuisanceModels, build_nuisance, split_by_customer, tabular_nuisance
from bellcal.oracles import dr_identity_gap
from bellcal.predictors import ConstantValue, FunctionValue, TabularValue, ValuePredictor


def tabular_setup(seed, S=8, A=2, gamma=0.8, n=20_000):
    rng = np.random.default_rng(seed)
    mdp = random_tabular_mdp(rng, S, A, gamma)
    b = random_policy_table(rng, S, A, floor=0.1)
    pi = random_policy_table(rng, S, A)
    data = sample_tabular_dataset(mdp, b, n, seed=seed + 1)
    return mdp, b, TabularPolicy(pi), data, tabular_nuisance(mdp.transition, mdp.reward)


ONE = np.zeros((1, 1))


class TestDrTarget:
    def test_gamma_zero_recovers_reward(self):
        nuis = NuisanceModels(
            weight_model=lambda s, a, p: np.ones(len(a)), reward_model=lambda s: np.zeros((len(s), 2))
        )
        tr = Transition(np.array([0.3]), 1, 4.5, np.array([0.1]), False)
        pi = TabularPolicy(np.array([[0.5, 0.5]]))
        v = ValuePredictor(ConstantValue(100.0))
        assert dr_target(tr, v, nuis, pi, 0.0) == pytest.approx(4.5)

    def test_iw_only_arithmetic(self):
        nuis = NuisanceModels("iw_only", weight_model=lambda s, a, p: np.ones(len(a)))
        tr = Transition(np.array([0.0]), 0, 1.0, np.array([0.0]), False)
        pi = TabularPolicy(np.array([[1.0, 0.0]]))
        assert dr_target(tr, ValuePredictor(ConstantValue(2.0)), nuis, pi, 0.5) == pytest.approx(2.0)
        done = Transition(np.array([0.0]), 0, 1.0, np.array([0.0]), True)
        assert dr_target(done, ValuePredictor(ConstantValue(2.0)), nuis, pi, 0.5) == pytest.approx(1.0)

    def test_exact_q_is_unbiased(self, rng):
        for _ in range(10):
            S, A = 7, 3
            mdp = random_tabular_mdp(rng, S, A, 0.9)
            b = random_policy_table(rng, S, A, floor=0.05)
            pi = random_policy_table(rng, S, A)
            v = rng.normal(size=S)
            w_hat = rng.uniform(0, 4, (S, A))
            gap = dr_identity_gap(mdp, b, pi, v, mdp.transition, mdp.reward, w_hat)
            np.testing.assert_allclose(gap, 0.0, atol=1e-10)

    def test_exact_weights_give_bellman_operator(self, rng):
        # with w_hat = w the bias term vanishes whatever the model
        S, A = 5, 2
        mdp = random_tabular_mdp(rng, S, A, 0.7)
        b = random_policy_table(rng, S, A, floor=0.1)
        pi = random_policy_table(rng, S, A)
        P_bad = rng.dirichlet(np.ones(S), size=(S, A))
        gap = dr_identity_gap(mdp, b, pi, rng.normal(size=S), P_bad, rng.random((S, A)), pi / b)
        np.testing.assert_allclose(gap, 0.0, atol=1e-10)

    def test_nonfinite_target(self):
        nuis = NuisanceModels(weight_model=lambda s, a, p: np.ones(len(a)))
        d = TransitionDataset(np.zeros((2, 1)), [0, 0], [1.0, 1.0], np.zeros((2, 1)), [False, False], num_actions=1)
        v = ValuePredictor(FunctionValue(lambda s: np.full(len(s), np.nan)))
        with pytest.raises(NonfiniteTarget):
            BellmanTargets(d, nuis, TabularPolicy(np.ones((1, 1))), 0.5)(v)


class TestIterated:
    def test_rejects_training_fold(self):
        mdp, b, pi, data, nuis = tabular_setup(0, n=500)
        with pytest.raises(FoldError):
            iterated_calibration(ValuePredictor(ConstantValue(0.0)), Fold(data, "train"), nuis, pi, 0.8)

    def test_true_value_is_preserved(self):
        mdp, b, pi, data, nuis = tabular_setup(1, n=100_000)
        v0 = tabular_value_solve(mdp, pi.table)
        cfg = CalibrationConfig(K=20, calibrator_class="histogram_explicit")
        res = iterated_calibration(
            ValuePredictor(TabularValue(v0)), data, nuis, pi, mdp.discount, cfg, partition=singleton_partition(v0)
        )
        out = res.predictor.predict(np.eye(8))
        assert np.max(np.abs(out - v0)) < 0.05 * mdp.reward.max() / (1 - mdp.discount)

    def test_diagnostics_and_early_stop(self):
        mdp, b, pi, data, nuis = tabular_setup(2, n=5000)
        v = ValuePredictor(TabularValue(np.arange(8.0)))
        res = iterated_calibration(v, data, nuis, pi, 0.8, CalibrationConfig(K=12, calibrator_class="histogram_equal_mass", B=4))
        assert res.diagnostics.iterations_run == 12 == len(res.diagnostics.successive_diffs)
        assert res.diagnostics.cells_per_iteration == [4] * 12
        cfg = CalibrationConfig(K=500, calibrator_class="histogram_equal_mass", B=4)
        full = iterated_calibration(v, data, nuis, pi, 0.8, cfg)
        stopped = iterated_calibration(v, data, nuis, pi, 0.8, replace(cfg, early_stop_tol=1e-8))
        assert stopped.diagnostics.iterations_run < 500
        assert stopped.diagnostics.successive_diffs[-1] < 1e-8
        np.testing.assert_allclose(stopped.predictor.predict(np.eye(8)), full.predictor.predict(np.eye(8)), atol=1e-6)

    def test_default_iteration_count(self):
        assert CalibrationConfig().iterations(1000) == 10
        assert CalibrationConfig().iterations(10**6) == 14
        assert CalibrationConfig(K=3).iterations(10**6) == 3
        with pytest.raises(ValueError):
            CalibrationConfig(K=0)

    def test_measurable_and_bounded(self, crm_data):
        train, cal = split_by_customer(crm_data, seed=0)
        nuis = build_nuisance(train)
        pi = TargetPolicy()
        base = ValuePredictor(FunctionValue(lambda s: np.round(s[:, 1] * 20)))  # many ties in v_hat
        for cls in ("isotonic", "histogram_equal_mass", "hybrid"):
            res = iterated_calibration(base, cal, nuis, pi, 0.9, CalibrationConfig(K=5, calibrator_class=cls))
            x = base.predict(cal.data.states)
            out = res.predictor.predict(cal.data.states)
            for t in np.unique(x):
                assert np.ptp(out[x == t]) == 0.0
            chi = res.diagnostics.final_targets
            assert chi.min() - 1e-12 <= out.min() and out.max() <= chi.max() + 1e-12

    def test_calibrator_composes_with_existing(self):
        inner = PiecewiseConstant([0.0], [1.0, 2.0])
        outer = PiecewiseConstant([1.5], [-1.0, 7.0])
        c = compose(outer, inner)
        t = np.array([-3.0, 0.0, 0.5, 9.0])
        np.testing.assert_array_equal(c(t), outer(inner(t)))

    def test_predictor_json_roundtrip(self, crm_data, tmp_path):
        train, cal = split_by_customer(crm_data, seed=0)
        nuis = build_nuisance(train)
        base = fit_base_estimator(train, nuis, TargetPolicy(), 0.99, iters=3)
        res = iterated_calibration(base, cal, nuis, TargetPolicy(), 0.99, CalibrationConfig(K=3))
        cfg = CalibrationConfig(K=3).to_dict()
        d = json.loads(json.dumps(res.predictor.to_dict(cfg)))
        assert set(d) == {"base_model", "calibrator", "config"}
        back = ValuePredictor.from_dict(d)
        np.testing.assert_array_equal(back.predict(cal.data.states), res.predictor.predict(cal.data.states))

    @pytest.mark.parametrize("cls", ["histogram_equal_mass", "isotonic"])
    def test_order_invariant_once_converged(self, cls):
        # the first targets see numeric values, so invariance only holds at the fixed point
        mdp, b, pi, data, nuis = tabular_setup(9, gamma=0.5, n=5000)
        vals = np.random.default_rng(0).normal(size=8)
        cfg = CalibrationConfig(K=80, calibrator_class=cls, B=4)
        ref = iterated_calibration(ValuePredictor(TabularValue(vals)), data, nuis, pi, 0.5, cfg)
        moved = iterated_calibration(ValuePredictor(TabularValue(np.exp(vals) * 3 - 1)), data, nuis, pi, 0.5, cfg)
        np.testing.assert_allclose(moved.predictor.predict(np.eye(8)), ref.predictor.predict(np.eye(8)), atol=1e-9)


class TestHybrid:
    def test_constant_pava_gives_constant(self):
        n = 200
        data = TransitionDataset(
            np.zeros((n, 1)) + np.arange(n)[:, None], np.zeros(n, dtype=int), np.linspace(1, 0, n),
            np.zeros((n, 1)), np.ones(n, dtype=bool), num_actions=1, bp=np.ones((n, 1)),
        )
        nuis = NuisanceModels("iw_only")
        base = ValuePredictor(FunctionValue(lambda s: s[:, 0]))
        res = hybrid_iso_hist(base, data, nuis, TabularPolicy(np.ones((1, 1))), 0.5, CalibrationConfig(K=4, calibrator_class="hybrid"))
        assert res.diagnostics.stage1_blocks == 1
        np.testing.assert_allclose(res.predictor.predict(data.states), 0.5)

    def test_partition_has_one_cell_per_block(self, crm_data):
        train, cal = split_by_customer(crm_data, seed=2)
        nuis = build_nuisance(train)
        pi = TargetPolicy()
        base = fit_base_estimator(train, nuis, pi, 0.99, iters=2)
        res = hybrid_iso_hist(base, cal, nuis, pi, 0.99, CalibrationConfig(K=3, calibrator_class="hybrid"))
        x = base.predict(cal.data.states)
        chi0 = BellmanTargets(cal.data, nuis, pi, 0.99)(base)
        m = fit_isotonic_pava(x, chi0).num_cells
        assert res.diagnostics.stage1_blocks == m
        assert res.diagnostics.partition.num_cells == m


class TestBaseEstimator:
    def test_one_iteration_gamma_zero_is_reward_regression(self, crm_data):
        train, _ = split_by_customer(crm_data, seed=0)
        nuis = build_nuisance(train, "iw_only")
        pi = TargetPolicy()
        v = fit_base_estimator(train, nuis, pi, 0.0, iters=1)
        from bellcal.regressors import fit_ridge

        d = train.data
        w = pi.probs(d.states)[np.arange(len(d)), d.actions] / d.bp[np.arange(len(d)), d.actions]
        ref = fit_ridge(d.states, w * d.rewards)
        np.testing.assert_allclose(v.predict(d.states), ref.predict(d.states), atol=1e-10)

    def test_tabular_fvi_converges(self):
        # uniform start states so the ridge penalty does not shrink a rarely seen state
        mdp, b, pi, _, nuis = tabular_setup(5, S=6, gamma=0.8)
        data = sample_tabular_dataset(mdp, b, 100_000, seed=6, state_distribution=np.full(6, 1 / 6))
        v = fit_base_estimator(Fold(data, "train"), nuis, pi, 0.8, "linear_ridge", iters=200)
        v0 = tabular_value_solve(mdp, pi.table)
        err = np.max(np.abs(v.predict(np.eye(6)) - v0))
        assert err <= 0.01 * mdp.reward.max() / (1 - 0.8)

    def test_snapshots(self, crm_data):
        train, _ = split_by_customer(crm_data, seed=0)
        nuis = build_nuisance(train)
        snaps = fitted_value_iteration(train, nuis, TargetPolicy(), 0.99, iters=10, snapshots=[2, 5])
        assert sorted(snaps) == [2, 5, 10]
        again = fit_base_estimator(train, nuis, TargetPolicy(), 0.99, iters=10, snapshot_at=5)
        np.testing.assert_array_equal(again.predict(train.data.states), snaps[5].predict(train.data.states))

    def test_early_snapshot_is_worse_calibrated(self, crm_params):
        from bellcal.crm import STREAM_EVAL_DATA, simulate_dataset

        data = simulate_dataset(crm_params, 3000, 24, seed=8)
        train, _ = split_by_customer(data, seed=8)
        nuis = build_nuisance(train)
        pi = TargetPolicy(crm_params)
        # holds for boosted stumps; linear ridge overshoots in calibration as it converges
        snaps = fitted_value_iteration(train, nuis, pi, 0.99, "boosted_stumps", iters=50, snapshots=[2])
        ev = simulate_dataset(crm_params, 2000, 24, seed=8, stream=STREAM_EVAL_DATA)
        assert estimate_cal_error(snaps[2], ev, nuis, pi, 0.99) > estimate_cal_error(snaps[50], ev, nuis, pi, 0.99)
