import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bellcal.errors import DimensionMismatch, InvalidDataset, OverlapViolation
from bellcal.mdp import (
    DeterministicPolicy,
    TabularMDP,
    TabularPolicy,
    Transition,
    TransitionDataset,
    bellman_apply,
    importance_ratio,
    policy_marginalize,
    random_policy_table,
    random_tabular_mdp,
    sample_tabular_dataset,
    stationary_distribution,
    tabular_value_solve,
)

S1 = np.array([0.0])


def f_table(values):
    return lambda s, a: values[a]


class TestPolicyMarginalize:
    def test_uniform(self):
        pi = TabularPolicy(np.array([[0.5, 0.5]]))
        assert policy_marginalize(f_table([1.0, 3.0]), pi, S1) == pytest.approx(2.0)

    def test_point_mass(self):
        pi = DeterministicPolicy(lambda s: np.ones(len(s), dtype=int), 2)
        assert policy_marginalize(f_table([5.0, -2.0]), pi, S1) == pytest.approx(-2.0)

    def test_weighted(self):
        pi = TabularPolicy(np.array([[0.3, 0.7]]))
        assert policy_marginalize(f_table([1.0, 3.0]), pi, S1) == pytest.approx(2.4)

    @given(
        st.lists(st.floats(-100, 100), min_size=3, max_size=3),
        st.lists(st.floats(-100, 100), min_size=3, max_size=3),
        st.floats(-5, 5),
        st.permutations([0, 1, 2]),
    )
    def test_linear_and_label_invariant(self, f, g, c, perm):
        p = np.array([[0.2, 0.5, 0.3]])
        pi = TabularPolicy(p)
        lin = policy_marginalize(lambda s, a: f[a] + c * g[a], pi, S1)
        sep = policy_marginalize(f_table(f), pi, S1) + c * policy_marginalize(f_table(g), pi, S1)
        assert lin == pytest.approx(sep, abs=1e-9)
        perm = np.asarray(perm)
        pi_p = TabularPolicy(p[:, perm])
        permuted = policy_marginalize(lambda s, a: f[perm[a]], pi_p, S1)
        assert permuted == pytest.approx(policy_marginalize(f_table(f), pi, S1), abs=1e-9)


class TestImportanceRatio:
    def test_equal_policies(self, rng):
        t = random_policy_table(rng, 4, 3)
        pi = TabularPolicy(t)
        for s in range(4):
            for a in range(3):
                assert importance_ratio(pi, pi, np.eye(4)[s], a) == pytest.approx(1.0)

    def test_ratio(self):
        pi = TabularPolicy(np.array([[0.9, 0.1]]))
        b0 = TabularPolicy(np.array([[0.3, 0.7]]))
        assert importance_ratio(pi, b0, S1, 0) == pytest.approx(3.0)

    def test_overlap_violation(self):
        pi = TabularPolicy(np.array([[0.5, 0.5]]))
        b0 = TabularPolicy(np.array([[1.0, 0.0]]))
        with pytest.raises(OverlapViolation):
            importance_ratio(pi, b0, S1, 1)

    def test_both_zero(self):
        pi = TabularPolicy(np.array([[1.0, 0.0]]))
        b0 = TabularPolicy(np.array([[1.0, 0.0]]))
        assert importance_ratio(pi, b0, S1, 1) == 0.0


class TestTabularSolve:
    def test_gamma_zero(self, rng):
        mdp = random_tabular_mdp(rng, 5, 2, 0.0)
        pi = random_policy_table(rng, 5, 2)
        _, r_pi = mdp.policy_kernel(pi)
        np.testing.assert_allclose(tabular_value_solve(mdp, pi), r_pi, atol=1e-12)

    def test_absorbing_geometric(self):
        mdp = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones(1), 0.9)
        assert tabular_value_solve(mdp, np.ones((1, 1)))[0] == pytest.approx(10.0)

    def test_matches_power_iteration(self, rng):
        mdp = random_tabular_mdp(rng, 3, 2, 0.95)
        pi = random_policy_table(rng, 3, 2)
        v = np.zeros(3)
        for _ in range(2000):
            v = bellman_apply(mdp, pi, v)
        np.testing.assert_allclose(tabular_value_solve(mdp, pi), v, atol=1e-6)

    def test_fixed_point(self, small_mdp, small_policy):
        v0 = tabular_value_solve(small_mdp, small_policy)
        np.testing.assert_allclose(bellman_apply(small_mdp, small_policy, v0), v0, atol=1e-8)


class TestBellmanApply:
    def test_zero_continuation(self, small_mdp, small_policy):
        _, r_pi = small_mdp.policy_kernel(small_policy)
        np.testing.assert_allclose(bellman_apply(small_mdp, small_policy, np.zeros(6)), r_pi)

    def test_hand_enumeration(self, rng):
        mdp = random_tabular_mdp(rng, 2, 2, 0.7)
        pi = random_policy_table(rng, 2, 2)
        v = rng.normal(size=2)
        expected = [
            sum(
                pi[s, a] * mdp.transition[s, a, t] * (mdp.reward[s, a] + 0.7 * v[t])
                for a in range(2)
                for t in range(2)
            )
            for s in range(2)
        ]
        np.testing.assert_allclose(bellman_apply(mdp, pi, v), expected, atol=1e-14)

    def test_dimension_mismatch(self, small_mdp, small_policy):
        with pytest.raises(DimensionMismatch):
            bellman_apply(small_mdp, small_policy, np.zeros(3))

    def test_sup_norm_contraction(self, small_mdp, small_policy, rng):
        for _ in range(100):
            v, w = rng.normal(size=(2, 6)) * 10
            lhs = np.max(np.abs(bellman_apply(small_mdp, small_policy, v) - bellman_apply(small_mdp, small_policy, w)))
            assert lhs <= small_mdp.discount * np.max(np.abs(v - w)) + 1e-12


def test_stationary_contraction(rng):
    # the L2(mu) norm of a stationary measure is not expanded by its kernel
    for _ in range(5):
        mdp = random_tabular_mdp(rng, 8, 2, 0.9)
        P, _ = mdp.policy_kernel(random_policy_table(rng, 8, 2))
        mu = stationary_distribution(P)
        assert mu is not None
        np.testing.assert_allclose(mu @ P, mu, atol=1e-10)
        for h in rng.normal(size=(100, 8)):
            assert np.sum(mu * (P @ h) ** 2) <= np.sum(mu * h**2) + 1e-9


def test_stationary_not_found_for_periodic_chain():
    flip = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert stationary_distribution(flip, init=np.array([1.0, 0.0]), max_iter=100) is None


def test_mdp_validation():
    with pytest.raises(ValueError):
        TabularMDP(np.full((1, 1, 1), 0.5), np.ones((1, 1)), np.ones(1), 0.9)
    with pytest.raises(ValueError):
        TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones(1), 1.0)
    with pytest.raises(DimensionMismatch):
        TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones(2) / 2, 0.5)


class TestDataset:
    def make(self):
        return TransitionDataset.from_transitions(
            [
                Transition(np.array([0.0, 1.0]), 1, 2.5, np.array([1.0, 1.0]), False),
                Transition(np.array([1.0, 1.0]), 0, -1.0, np.array([2.0, 0.5]), True),
            ],
            num_actions=2,
            seed=9,
        )

    def test_jsonl_roundtrip(self, tmp_path):
        d = self.make()
        path = tmp_path / "d.jsonl"
        d.save(path)
        lines = path.read_text().splitlines()
        assert json.loads(lines[0]) == {"state_dim": 2, "num_actions": 2, "seed": 9}
        assert set(json.loads(lines[1])) == {"s", "a", "r", "sn", "done"}
        back = TransitionDataset.load(path)
        assert back.to_jsonl() == d.to_jsonl()
        assert back[1].done and back[0].action == 1

    def test_invalid(self):
        with pytest.raises(InvalidDataset):
            TransitionDataset.from_jsonl('{"state_dim": 1, "num_actions": 2, "seed": 0}\n')
        with pytest.raises((ValueError, InvalidDataset)):
            TransitionDataset(np.zeros((1, 1)), [2], [0.0], np.zeros((1, 1)), [False], num_actions=2)
        with pytest.raises((ValueError, InvalidDataset)):
            TransitionDataset(np.zeros((1, 1)), [0], [np.nan], np.zeros((1, 1)), [False], num_actions=2)

    def test_sampled_tabular_dataset(self, small_mdp, small_policy):
        d = sample_tabular_dataset(small_mdp, small_policy, 5000, seed=3)
        assert len(d) == 5000 and d.state_dim == 6
        freq = d.states.mean(axis=0)
        np.testing.assert_allclose(freq, small_mdp.initial_distribution, atol=0.03)
        np.testing.assert_allclose(d.bp, small_policy[d.states.argmax(1)])


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_policy_tables_are_distributions(seed):
    rng = np.random.default_rng(seed)
    t = random_policy_table(rng, 5, 3, floor=0.02)
    assert np.all(t >= 0.02 - 1e-12)
    np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-9)
