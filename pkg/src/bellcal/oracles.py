"""Deterministic brute-force check suites, runnable from the command line."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import BellmanTargets
from .calibrators import BinScheme, fit_isotonic_pava, isotonic_minmax_oracle, make_partition
from .evaluation import (
    apply_coarsened_operator,
    coarsened_fixed_point_exact,
    decomposition_report,
    singleton_partition,
)
from .mdp import (
    TabularMDP,
    TabularPolicy,
    TransitionDataset,
    one_hot,
    random_policy_table,
    random_tabular_mdp,
    stationary_distribution,
    tabular_value_solve,
)
from .nuisance import tabular_nuisance
from .predictors import TabularValue, ValuePredictor

SUITES = ("pava", "dr_identity", "contraction", "fixed_point", "decomposition")


@dataclass
class SuiteReport:
    suite: str
    instances: int = 0
    skipped: int = 0
    failures: list = field(default_factory=list)  # (seed, message)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def fail(self, seed: int, msg: str) -> None:
        self.failures.append((int(seed), msg))

    def summary(self) -> str:
        ok = self.instances - len(self.failures)
        line = f"{self.suite}: {ok}/{self.instances} instances passed"
        if self.skipped:
            line += f", {self.skipped} skipped"
        return line + f" ({self.seconds:.2f}s)"


def _pooled(xs, ys):
    ux, inv = np.unique(xs, return_inverse=True)
    return ux, inv, np.bincount(inv, weights=ys), np.bincount(inv).astype(float)


def suite_pava(n_instances: int = 1000, max_n: int = 50, tol: float = 1e-10, seed0: int = 0) -> SuiteReport:
    """PAVA fitted values against the min-max formula, including tied inputs and weights."""
    rep = SuiteReport("pava")
    for k in range(n_instances):
        seed = seed0 + k
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, max_n + 1))
        xs = rng.integers(0, max(2, n // 2 + 1), n).astype(float) if k % 3 == 0 else rng.normal(size=n)
        ys = rng.normal(size=n) + (0.5 * xs if k % 2 else 0.0)
        w = rng.uniform(0.2, 3.0, n) if k % 5 == 0 else np.ones(n)
        fitted = fit_isotonic_pava(xs, ys, w)(xs)
        # oracle on tie-pooled data: pooled mean with summed weight
        ux, inv, _, _ = _pooled(xs, ys)
        sw = np.bincount(inv, weights=w)
        swy = np.bincount(inv, weights=w * ys)
        ref = isotonic_minmax_oracle(swy / sw, sw)[inv]
        rep.instances += 1
        err = float(np.max(np.abs(fitted - ref)))
        order = np.argsort(xs, kind="stable")
        if err > tol:
            rep.fail(seed, f"max deviation {err:.3e} from min-max oracle (n={n})")
        elif np.any(np.diff(fitted[order]) < 0):
            rep.fail(seed, "fit is not monotone")
    return rep


def enumerated_dataset(S: int, A: int, bp: np.ndarray) -> tuple[TransitionDataset, np.ndarray, np.ndarray, np.ndarray]:
    """Every (s, a, s') triple as one transition; returns the dataset and index arrays."""
    s, a, sn = (g.reshape(-1) for g in np.meshgrid(np.arange(S), np.arange(A), np.arange(S), indexing="ij"))
    data = TransitionDataset(
        one_hot(s, S), a, np.zeros(s.size), one_hot(sn, S), np.zeros(s.size, dtype=bool), num_actions=A, bp=bp[s]
    )
    return data, s, a, sn


def dr_identity_gap(mdp: TabularMDP, b: np.ndarray, pi: np.ndarray, v: np.ndarray, P_hat, r_hat, w_hat) -> np.ndarray:
    """E[target | S=s] - T_pi v - b0{(w - w_hat)(q_hat - q)} for every state, by enumeration."""
    S, A = mdp.num_states, mdp.num_actions
    data, s, a, sn = enumerated_dataset(S, A, b)
    data = TransitionDataset(
        data.states, a, mdp.reward[s, a], data.next_states, data.dones, num_actions=A, bp=data.bp
    )
    nuis = tabular_nuisance(P_hat, r_hat, w_hat)
    vp = ValuePredictor(TabularValue(v))
    tgt = BellmanTargets(data, nuis, TabularPolicy(pi), mdp.discount)(vp)
    prob = b[s, a] * mdp.transition[s, a, sn]
    expected = np.bincount(s, weights=prob * tgt, minlength=S)
    gamma = mdp.discount
    q = mdp.reward + gamma * np.einsum("sat,t->sa", mdp.transition, v)
    q_hat = r_hat + gamma * np.einsum("sat,t->sa", P_hat, v)
    w = pi / b
    bellman = np.einsum("sa,sa->s", pi, q)
    bias = np.einsum("sa,sa->s", b, (w - w_hat) * (q_hat - q))
    return expected - bellman - bias


def suite_dr_identity(n_instances: int = 100, tol: float = 1e-10, seed0: int = 0) -> SuiteReport:
    """Conditional bias of the DR target equals the product of nuisance errors."""
    rep = SuiteReport("dr_identity")
    for k in range(n_instances):
        seed = seed0 + k
        rng = np.random.default_rng([seed, 11])
        S = int(rng.integers(2, 21))
        A = int(rng.integers(2, 4))
        mdp = random_tabular_mdp(rng, S, A, float(rng.uniform(0.0, 0.95)))
        b = random_policy_table(rng, S, A, floor=0.05)
        pi = random_policy_table(rng, S, A)
        v = rng.normal(size=S) * 3
        P_hat = rng.dirichlet(np.ones(S), size=(S, A))
        r_hat = rng.random((S, A))
        w_hat = rng.uniform(0, 3, (S, A))
        rep.instances += 1
        gap = dr_identity_gap(mdp, b, pi, v, P_hat, r_hat, w_hat)
        exact_w = dr_identity_gap(mdp, b, pi, v, P_hat, r_hat, pi / b)
        exact_q = dr_identity_gap(mdp, b, pi, v, mdp.transition, mdp.reward, w_hat)
        worst = max(np.max(np.abs(g)) for g in (gap, exact_w, exact_q))
        if worst > tol:
            rep.fail(seed, f"identity residual {worst:.3e} (S={S}, A={A})")
    return rep


def suite_contraction(n_mdps: int = 20, n_h: int = 100, tol: float = 1e-9, seed0: int = 0) -> SuiteReport:
    """The policy kernel does not expand the L2 norm of its own stationary measure."""
    rep = SuiteReport("contraction")
    for k in range(n_mdps):
        seed = seed0 + k
        rng = np.random.default_rng([seed, 13])
        S = int(rng.integers(2, 21))
        mdp = random_tabular_mdp(rng, S, 3, 0.9, sparsity=0.3 if k % 2 else 0.0)
        P_pi, _ = mdp.policy_kernel(random_policy_table(rng, S, 3))
        stat = stationary_distribution(P_pi)
        if stat is None:
            rep.skipped += 1
            continue
        rep.instances += 1
        H = rng.normal(size=(n_h, S)) * rng.uniform(0.1, 10, (n_h, 1))
        lhs = np.sqrt((stat * (H @ P_pi.T) ** 2).sum(axis=1))
        rhs = np.sqrt((stat * H**2).sum(axis=1))
        if np.any(lhs > rhs + tol):
            rep.fail(seed, f"expansion by {float(np.max(lhs - rhs)):.3e}")
    return rep


def suite_fixed_point(n_instances: int = 100, tol: float = 1e-10, seed0: int = 0) -> SuiteReport:
    """Exact coarsened fixed point: self-consistency, singleton bins and a single bin."""
    rep = SuiteReport("fixed_point")
    for k in range(n_instances):
        seed = seed0 + k
        rng = np.random.default_rng([seed, 17])
        S = int(rng.integers(3, 21))
        mdp = random_tabular_mdp(rng, S, 2, float(rng.uniform(0.0, 0.95)))
        pi = random_policy_table(rng, S, 2)
        v_hat = rng.normal(size=S)
        part = make_partition(v_hat, min(3, S), BinScheme.EQUAL_MASS)
        rep.instances += 1
        fp = coarsened_fixed_point_exact(mdp, pi, v_hat, part)
        resid = np.max(np.abs(apply_coarsened_operator(mdp, pi, v_hat, part, fp) - fp))
        cells = part.assign(v_hat)
        spread = max(np.ptp(fp[cells == c]) for c in np.unique(cells))
        uniform = np.full(S, 1.0 / S)
        single = coarsened_fixed_point_exact(mdp, pi, v_hat, singleton_partition(v_hat), uniform)
        sing_err = np.max(np.abs(single - tabular_value_solve(mdp, pi)))
        _, r_pi = mdp.policy_kernel(pi)
        one = coarsened_fixed_point_exact(mdp, pi, v_hat, make_partition(v_hat, 1), uniform)
        one_err = np.max(np.abs(one - r_pi.mean() / (1 - mdp.discount)))
        if resid > tol or spread > tol:
            rep.fail(seed, f"fixed-point residual {resid:.3e}, within-bin spread {spread:.3e}")
        elif sing_err > 1e-8 or one_err > 1e-8:
            rep.fail(seed, f"singleton error {sing_err:.3e}, one-bin error {one_err:.3e}")
    return rep


def suite_decomposition(n_instances: int = 500, tol: float = 1e-9, seed0: int = 0) -> SuiteReport:
    """Total error never exceeds refinement plus calibration terms."""
    rep = SuiteReport("decomposition")
    for k in range(n_instances):
        seed = seed0 + k
        rng = np.random.default_rng([seed, 19])
        S = 20
        mdp = random_tabular_mdp(rng, S, 2, 0.8, sparsity=0.5 if k % 4 == 0 else 0.0)
        pi = random_policy_table(rng, S, 2)
        v0 = tabular_value_solve(mdp, pi)
        v_hat = v0 + rng.normal(scale=rng.uniform(0.1, 3.0), size=S) if k % 2 else rng.normal(size=S) * 3
        part = make_partition(v_hat, int(rng.integers(1, 9)), BinScheme.EQUAL_MASS)
        d = decomposition_report(mdp, pi, v_hat, part)
        if not d.applicable:
            rep.skipped += 1
            continue
        rep.instances += 1
        if d.total > d.refinement + d.calibration + tol:
            rep.fail(seed, f"total {d.total:.6g} > {d.refinement:.6g} + {d.calibration:.6g}")
    return rep


_RUNNERS = {
    "pava": suite_pava,
    "dr_identity": suite_dr_identity,
    "contraction": suite_contraction,
    "fixed_point": suite_fixed_point,
    "decomposition": suite_decomposition,
}


def run_suite(name: str, **kwargs) -> SuiteReport:
    if name not in _RUNNERS:
        raise KeyError(f"unknown oracle suite {name!r}; choose from {', '.join(SUITES)}")
    t0 = time.perf_counter()
    rep = _RUNNERS[name](**kwargs)
    rep.seconds = time.perf_counter() - t0
    return rep
