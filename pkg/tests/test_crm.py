import numpy as np
import pytest

from bellcal import crm
from bellcal.crm import (
    BehaviorPolicy,
    CrmEnv,
    CrmParams,
    CrmState,
    TargetPolicy,
    behavior_action,
    crm_step,
    monte_carlo_value,
    simulate_dataset,
    target_action,
)
from bellcal.errors import TruncationTooLoose
from bellcal.mdp import TabularEnv, TabularMDP, TabularPolicy, one_hot, tabular_value_solve

P = CrmParams()


class TestStep:
    def test_inactive_is_absorbing(self):
        s = CrmState(tenure=7, engagement=0.4, fatigue=0.2, value_segment=2.0, price_sensitivity=0.3, active=False)
        for a in range(3):
            nxt, r = crm_step(s, a, P, np.random.default_rng(a))
            assert nxt == s and r == 0.0

    def test_max_tenure_absorbs(self):
        s = CrmState(tenure=60, engagement=0.9, fatigue=0.0, value_segment=1.0, price_sensitivity=0.5)
        for seed in range(20):
            nxt, _ = crm_step(s, 1, P, np.random.default_rng(seed))
            assert not nxt.active and nxt.tenure == 60
        nxt, _ = crm_step(CrmState(tenure=59), 0, CrmParams(churn_override=0.0), np.random.default_rng(0))
        assert not nxt.active

    def test_deterministic_under_seed(self):
        s = CrmState(tenure=3, engagement=0.6, fatigue=0.1, value_segment=1.5, price_sensitivity=0.4)
        a = crm_step(s, 2, P, np.random.default_rng(42))
        b = crm_step(s, 2, P, np.random.default_rng(42))
        assert a == b

    def test_clamping(self):
        s = CrmState(engagement=1.7, fatigue=-0.3, price_sensitivity=2.0)
        assert (s.engagement, s.fatigue, s.price_sensitivity) == (1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            CrmState(tenure=61)
        with pytest.raises(ValueError):
            CrmState(value_segment=0.0)

    def test_fatigue_nondecreasing_under_strong_promotions(self):
        s = CrmState(engagement=0.5, fatigue=0.0, value_segment=1.0, price_sensitivity=0.5)
        g = np.random.default_rng(1)
        fat = [s.fatigue]
        p = CrmParams(churn_override=0.0)
        for _ in range(12):
            s, _ = crm_step(s, crm.STRONG, p, g)
            fat.append(s.fatigue)
        assert np.all(np.diff(fat) >= 0) and fat[-1] == 1.0

    def test_expected_reward_gamma_zero(self):
        # one-step Monte Carlo vs the closed-form expected revenue
        s = np.array([5, 0.6, 0.2, 1.3, 0.7, 1.0])
        vc, (up, cost) = P.visit_logit_coeffs, (P.uplift_per_action[1], P.discount_cost[1])
        p_visit = 1 / (1 + np.exp(-(vc[0] + vc[1] * 0.6 + vc[2] * 0.2 + vc[4])))
        expected = p_visit * 1.3 * up * (1 - 0.7 * cost) * np.exp(P.revenue_lognormal_sigma**2 / 2)
        pi = _ConstantAction(1)
        res = monte_carlo_value(P, pi, [s], 0.0, 200_000, 1, seed=2)
        assert abs(res.values[0] - expected) < 4 * res.std_errors[0]


class _ConstantAction:
    num_actions = 3

    def __init__(self, a):
        self.a = a

    def probs(self, states):
        return one_hot(np.full(np.atleast_2d(states).shape[0], self.a), 3)


class TestPolicies:
    def test_suppressed_for_engaged_fatigued(self):
        _, p = behavior_action(CrmState(engagement=0.9, fatigue=0.9), np.random.default_rng(0))
        assert np.argmax(p) == 0

    def test_light_by_default(self):
        _, p = behavior_action(CrmState(engagement=0.5, fatigue=0.1), np.random.default_rng(0))
        assert np.argmax(p) == 1

    def test_strong_for_low_engagement_high_value(self):
        states = crm.sample_initial_states(P, 2000, seed=1)
        baseline = crm.behavior_probs(states, P)[:, 2].mean()
        _, p = behavior_action(CrmState(engagement=0.1, value_segment=3.0), np.random.default_rng(0))
        assert p[2] > baseline

    def test_overlap_floor(self, crm_data):
        assert crm_data.bp.min() >= 0.02 - 1e-15
        np.testing.assert_allclose(crm_data.bp.sum(axis=1), 1.0, atol=1e-12)

    def test_target_rule(self):
        assert target_action(CrmState(engagement=0.1, price_sensitivity=0.9)) == 2
        assert target_action(CrmState(engagement=0.95, value_segment=P.high_value * 1.01)) == 0
        # thresholds are strict: boundary states fall through to light promotion
        assert target_action(CrmState(engagement=P.low_engagement, price_sensitivity=0.9)) == 1
        assert target_action(CrmState(engagement=0.1, price_sensitivity=P.high_sensitivity)) == 1
        assert target_action(CrmState(engagement=P.high_engagement, value_segment=5.0)) == 1
        assert target_action(CrmState(engagement=0.95, value_segment=P.high_value)) == 1

    def test_high_value_is_top_quartile(self):
        vs = crm.sample_initial_states(P, 20_000, seed=4)[:, crm.VALUE]
        assert np.mean(vs > P.high_value) == pytest.approx(0.25, abs=0.01)

    def test_sampled_action_matches_probabilities(self):
        g = np.random.default_rng(3)
        s = CrmState(engagement=0.3, fatigue=0.2, value_segment=2.0)
        draws = [behavior_action(s, g)[0] for _ in range(20_000)]
        _, p = behavior_action(s, g)
        np.testing.assert_allclose(np.bincount(draws, minlength=3) / 20_000, p, atol=0.015)


class TestSimulate:
    def test_single_step(self):
        d = simulate_dataset(P, 1, 1, seed=0)
        assert len(d) == 1 and d.cid.tolist() == [0]

    def test_byte_identical(self):
        assert simulate_dataset(P, 30, 6, 8).to_jsonl() == simulate_dataset(P, 30, 6, 8).to_jsonl()

    def test_customers_have_independent_streams(self):
        small = simulate_dataset(P, 10, 12, 3)
        big = simulate_dataset(P, 25, 12, 3)
        keep = big.cid < 10
        np.testing.assert_array_equal(big.states[keep], small.states)
        np.testing.assert_array_equal(big.rewards[keep], small.rewards)

    def test_count_matches_scalar_replay(self):
        n, horizon, seed = 1000, 24, 11
        d = simulate_dataset(P, n, horizon, seed)
        active_months = 0
        for i in range(n):
            g = crm.unit_rng(seed, crm.STREAM_DATA, i)
            s = CrmState.from_vector(crm.initial_state(g, P))
            for _ in range(horizon):
                if not s.active:
                    break
                a, _ = behavior_action(s, g, P)
                s, _ = crm_step(s, a, P, g)
                active_months += 1
        assert len(d) == active_months <= n * horizon

    def test_replay_reproduces_transitions(self):
        d = simulate_dataset(P, 3, 24, 2)
        g = crm.unit_rng(2, crm.STREAM_DATA, 1)
        s = crm.initial_state(g, P)
        rows = np.flatnonzero(d.cid == 1)
        for j in rows:
            a, p = behavior_action(s, g, P)
            nxt, r = crm_step(s, a, P, g)
            np.testing.assert_array_equal(d.states[j], s)
            assert d.actions[j] == a and d.rewards[j] == r
            np.testing.assert_array_equal(d.bp[j], p)
            s = nxt

    def test_invariants(self, crm_data):
        assert np.all(crm_data.rewards >= 0)
        assert np.all(crm_data.states[:, crm.ACTIVE] == 1.0)
        np.testing.assert_array_equal(crm_data.bp, crm.behavior_probs(crm_data.states, P))
        # each customer's last transition is terminal only if it was absorbed
        for c in np.unique(crm_data.cid)[:50]:
            dn = crm_data.dones[crm_data.cid == c]
            assert not dn[:-1].any()
        nxt, r, _ = crm.step_arrays(crm_data.next_states[crm_data.dones], crm_data.actions[crm_data.dones], P,
                                    np.full((int(crm_data.dones.sum()), 3), 0.5))
        assert np.all(r == 0.0)

    def test_certain_churn_gives_one_transition_each(self):
        d = simulate_dataset(CrmParams(churn_override=1.0), 50, 24, 1)
        assert len(d) == 50 and d.dones.all()

    def test_design_targets(self):
        # lifetime, policy disagreement and weight bound the default parameters were tuned for
        d = simulate_dataset(P, 4000, 60, 21)
        lifetime = np.bincount(d.cid).mean()
        assert 10.0 <= lifetime <= 14.0
        disagree = np.mean(crm.target_actions(d.states, P) != np.argmax(d.bp, axis=1))
        assert disagree >= 0.30
        idx = np.arange(len(d))
        w = TargetPolicy(P).probs(d.states)[idx, d.actions] / d.bp[idx, d.actions]
        assert w.max() < 50

    def test_params_validation(self):
        with pytest.raises(ValueError):
            CrmParams(revenue_lognormal_sigma=0.0)
        with pytest.raises(ValueError):
            CrmParams(engagement_decay=1.0)
        with pytest.raises(ValueError):
            CrmParams(uplift_per_action=(1.0, float("nan"), 1.0))
        with pytest.raises(ValueError):
            CrmParams.from_dict({"no_such": 1})
        assert CrmParams.from_dict(P.to_dict()) == P


class TestMonteCarlo:
    def test_inactive_initial_state(self):
        s = CrmState(active=False, tenure=10)
        res = monte_carlo_value(P, TargetPolicy(P), [s], 0.99, 50, 61, seed=0)
        assert res.values[0] == 0.0

    def test_tabular_adapter_matches_solve(self):
        mdp = TabularMDP(
            np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.5, 0.5], [0.1, 0.9]]]),
            np.array([[1.0, 0.0], [0.5, 2.0]]),
            np.array([0.5, 0.5]),
            0.9,
        )
        pi = np.array([[0.6, 0.4], [0.3, 0.7]])
        res = monte_carlo_value(TabularEnv(mdp), TabularPolicy(pi), np.eye(2), 0.9, 200_000, 120, seed=1, tol=1e-3)
        v0 = tabular_value_solve(mdp, pi)
        assert np.all(np.abs(res.values - v0) <= 3 * res.std_errors)

    def test_truncation_too_loose(self):
        mdp = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones(1), 0.9)
        with pytest.raises(TruncationTooLoose):
            monte_carlo_value(TabularEnv(mdp), TabularPolicy(np.ones((1, 1))), np.eye(1), 0.9, 10, 20, 0, tol=1e-6)

    def test_crm_horizon_is_exact_after_max_tenure(self):
        S0 = crm.sample_initial_states(P, 5, seed=0)
        a = monte_carlo_value(CrmEnv(P), TargetPolicy(P), S0, 0.99, 40, 61, seed=3)
        b = monte_carlo_value(CrmEnv(P), TargetPolicy(P), S0, 0.99, 40, 200, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        with pytest.raises(TruncationTooLoose):
            monte_carlo_value(CrmEnv(P), TargetPolicy(P), S0, 0.99, 40, 30, seed=3)

    def test_rollouts_independent_per_initial_state(self):
        S0 = crm.sample_initial_states(P, 6, seed=0)
        full = monte_carlo_value(P, BehaviorPolicy(P), S0, 0.99, 30, 61, seed=9)
        part = monte_carlo_value(P, BehaviorPolicy(P), S0[:3], 0.99, 30, 61, seed=9)
        np.testing.assert_array_equal(full.values[:3], part.values)
