"""MDP primitives: transitions, policies, Bellman operators and the exact tabular solver."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidDataset,
    OverlapViolation,
    SolverFailure,
)

PROB_TOL = 1e-9


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool = False


@dataclass
class TransitionDataset:
    """Columnar store of logged transitions.

    Rows are kept as parallel arrays so the estimators can work vectorized;
    iterating yields :class:`Transition` objects in logged order.  ``bp`` holds
    the behavior action probabilities at each logged state when known and
    ``cid`` the trajectory (customer) id used for splitting.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    num_actions: int
    seed: int = 0
    bp: np.ndarray | None = None
    cid: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.next_states = np.atleast_2d(np.asarray(self.next_states, dtype=float))
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        if self.bp is not None:
            self.bp = np.atleast_2d(np.asarray(self.bp, dtype=float))
        if self.cid is not None:
            self.cid = np.asarray(self.cid, dtype=np.int64).reshape(-1)
        self.validate()

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            self.states[i].copy(),
            int(self.actions[i]),
            float(self.rewards[i]),
            self.next_states[i].copy(),
            bool(self.dones[i]),
        )

    def validate(self) -> None:
        n = len(self)
        if n == 0:
            raise InvalidDataset("dataset is empty")
        if self.states.shape != self.next_states.shape or self.states.shape[0] != n:
            raise DimensionMismatch(
                f"states {self.states.shape} / next_states {self.next_states.shape} / n={n}"
            )
        if self.actions.shape[0] != n or self.dones.shape[0] != n:
            raise DimensionMismatch("actions/dones length does not match rewards")
        if np.any(self.actions < 0) or np.any(self.actions >= self.num_actions):
            raise InvalidDataset(f"actions must lie in [0, {self.num_actions})")
        if not np.all(np.isfinite(self.rewards)):
            raise InvalidDataset("rewards must be finite")
        if self.bp is not None and self.bp.shape != (n, self.num_actions):
            raise DimensionMismatch(f"bp has shape {self.bp.shape}, expected {(n, self.num_actions)}")
        if self.cid is not None and self.cid.shape[0] != n:
            raise DimensionMismatch("cid length does not match rewards")

    def subset(self, idx: np.ndarray) -> "TransitionDataset":
        idx = np.asarray(idx)
        return TransitionDataset(
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.dones[idx],
            num_actions=self.num_actions,
            seed=self.seed,
            bp=None if self.bp is None else self.bp[idx],
            cid=None if self.cid is None else self.cid[idx],
        )

    @classmethod
    def from_transitions(
        cls, transitions: Sequence[Transition], num_actions: int, seed: int = 0
    ) -> "TransitionDataset":
        return cls(
            np.array([t.state for t in transitions], dtype=float),
            np.array([t.action for t in transitions]),
            np.array([t.reward for t in transitions], dtype=float),
            np.array([t.next_state for t in transitions], dtype=float),
            np.array([t.done for t in transitions], dtype=bool),
            num_actions=num_actions,
            seed=seed,
        )

    # JSON Lines: header line, then one object per transition.
    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"state_dim": self.state_dim, "num_actions": self.num_actions, "seed": int(self.seed)}
            )
        ]
        for i in range(len(self)):
            rec = {
                "s": self.states[i].tolist(),
                "a": int(self.actions[i]),
                "r": float(self.rewards[i]),
                "sn": self.next_states[i].tolist(),
                "done": bool(self.dones[i]),
            }
            if self.bp is not None:
                rec["bp"] = self.bp[i].tolist()
            if self.cid is not None:
                rec["cid"] = int(self.cid[i])
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TransitionDataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise InvalidDataset("empty JSONL input")
        header = json.loads(lines[0])
        d, k = int(header["state_dim"]), int(header["num_actions"])
        recs = [json.loads(ln) for ln in lines[1:]]
        if not recs:
            raise InvalidDataset("dataset has a header but no transitions")
        for j, rec in enumerate(recs):
            if len(rec["s"]) != d or len(rec["sn"]) != d:
                raise DimensionMismatch(f"record {j}: state dimension differs from header ({d})")
        has_bp = all("bp" in r for r in recs)
        has_cid = all("cid" in r for r in recs)
        return cls(
            np.array([r["s"] for r in recs], dtype=float).reshape(len(recs), d),
            np.array([r["a"] for r in recs]),
            np.array([r["r"] for r in recs], dtype=float),
            np.array([r["sn"] for r in recs], dtype=float).reshape(len(recs), d),
            np.array([r["done"] for r in recs], dtype=bool),
            num_actions=k,
            seed=int(header.get("seed", 0)),
            bp=np.array([r["bp"] for r in recs], dtype=float) if has_bp else None,
            cid=np.array([r["cid"] for r in recs]) if has_cid else None,
        )

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_jsonl())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TransitionDataset":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory plus rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"output directory does not exist: {directory} (for {path})")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# Policies


class Policy(Protocol):
    num_actions: int

    def probs(self, states: np.ndarray) -> np.ndarray:
        """Return an ``(n, num_actions)`` matrix of action probabilities."""
        ...


def check_probs(p: np.ndarray, tol: float = PROB_TOL) -> None:
    p = np.atleast_2d(p)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise ValueError("policy output is not a probability vector")


def one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    out = np.zeros((idx.shape[0], n))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


def state_index(states: np.ndarray) -> np.ndarray:
    """Index of one-hot encoded tabular states."""
    return np.argmax(np.atleast_2d(states), axis=1)


@dataclass(frozen=True)
class TabularPolicy:
    """Policy given by an ``(num_states, num_actions)`` table over one-hot states."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        check_probs(t)
        object.__setattr__(self, "table", t)

    @property
    def num_actions(self) -> int:
        return self.table.shape[1]

    def probs(self, states: np.ndarray) -> np.ndarray:
        return self.table[state_index(states)]


@dataclass(frozen=True)
class FunctionPolicy:
    fn: Callable[[np.ndarray], np.ndarray]
    num_actions: int

    def probs(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(states)), dtype=float)


@dataclass(frozen=True)
class DeterministicPolicy:
    """Wraps a vectorized ``states -> action index`` rule as a one-hot policy."""

    rule: Callable[[np.ndarray], np.ndarray]
    num_actions: int

    def probs(self, states: np.ndarray) -> np.ndarray:
        return one_hot(self.rule(np.atleast_2d(states)), self.num_actions)


def _policy_table(pi, num_states: int) -> np.ndarray:
    if isinstance(pi, TabularPolicy):
        return pi.table
    if hasattr(pi, "probs"):
        return np.asarray(pi.probs(np.eye(num_states)), dtype=float)
    return np.asarray(pi, dtype=float)


def policy_marginalize(f: Callable[[np.ndarray, int], float], pi: Policy, s) -> float:
    """(pi f)(s) = sum_a pi(a|s) f(s, a)."""
    s = np.asarray(s, dtype=float)
    p = pi.probs(s[None, :])[0]
    vals = np.array([f(s, a) for a in range(p.shape[0])], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("f must be finite at every action")
    return float(p @ vals)


def importance_ratio(pi: Policy, b0: Policy, s, a: int) -> float:
    s = np.asarray(s, dtype=float)[None, :]
    num = float(pi.probs(s)[0, a])
    den = float(b0.probs(s)[0, a])
    if den == 0.0:
        if num == 0.0:
            return 0.0
        raise OverlapViolation(f"b0({a}|s)=0 while pi({a}|s)={num}")
    return num / den


# --------------------------------------------------------------------------
# Tabular MDPs


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # r0[s, a]
    initial_distribution: np.ndarray
    discount: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        start = np.asarray(self.initial_distribution, dtype=float)
        S, A = r.shape
        if P.shape != (S, A, S):
            raise DimensionMismatch(f"transition shape {P.shape} != {(S, A, S)}")
        if start.shape != (S,):
            raise DimensionMismatch("initial distribution length differs from num_states")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("each P(.|s,a) must be a probability vector")
        if np.any(start < 0) or abs(start.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_distribution", start)

    @property
    def num_states(self) -> int:
        return self.reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward.shape[1]

    def policy_kernel(self, pi) -> tuple[np.ndarray, np.ndarray]:
        """Return (P_pi, r_pi) for a policy table or Policy object."""
        table = _policy_table(pi, self.num_states)
        P_pi = np.einsum("sa,sat->st", table, self.transition)
        r_pi = np.einsum("sa,sa->s", table, self.reward)
        return P_pi, r_pi


def tabular_value_solve(mdp: TabularMDP, pi) -> np.ndarray:
    """Solve (I - gamma P_pi) v = r_pi directly."""
    P_pi, r_pi = mdp.policy_kernel(pi)
    A = np.eye(mdp.num_states) - mdp.discount * P_pi
    try:
        v = np.linalg.solve(A, r_pi)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure(str(exc)) from exc
    if not np.all(np.isfinite(v)):
        raise SolverFailure("non-finite value solution")
    return v


def bellman_apply(mdp: TabularMDP, pi, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.num_states,):
        raise DimensionMismatch(f"value vector has shape {v.shape}, expected ({mdp.num_states},)")
    P_pi, r_pi = mdp.policy_kernel(pi)
    return r_pi + mdp.discount * P_pi @ v


def stationary_distribution(
    P: np.ndarray, tol: float = 1e-12, max_iter: int = 10_000, init: np.ndarray | None = None
) -> np.ndarray | None:
    """Power iteration dist <- dist P; returns None when it fails to converge."""
    n = P.shape[0]
    dist = np.full(n, 1.0 / n) if init is None else np.asarray(init, dtype=float)
    for _ in range(max_iter):
        nxt = dist @ P
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - dist)) < tol:
            return nxt
        dist = nxt
    return None


def random_tabular_mdp(
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    discount: float,
    sparsity: float = 0.0,
) -> TabularMDP:
    """Random MDP with Dirichlet transition rows and uniform rewards in [0, 1]."""
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    if sparsity > 0:
        mask = rng.random(P.shape) < sparsity
        # keep at least one successor per row
        mask[..., 0] &= False
        P = np.where(mask, 0.0, P)
        P /= P.sum(axis=2, keepdims=True)
    r = rng.random((num_states, num_actions))
    start = rng.dirichlet(np.ones(num_states))
    return TabularMDP(P, r, start, discount)


def random_policy_table(rng: np.random.Generator, num_states: int, num_actions: int, floor: float = 0.0):
    t = rng.dirichlet(np.ones(num_actions), size=num_states)
    t = floor + (1.0 - floor * num_actions) * t
    return t / t.sum(axis=1, keepdims=True)


def sample_tabular_dataset(
    mdp: TabularMDP,
    behavior,
    n: int,
    seed: int,
    state_distribution: np.ndarray | None = None,
    reward_noise: float = 0.0,
) -> TransitionDataset:
    """Draw n i.i.d. transitions with S ~ state_distribution (default: the initial distribution), A ~ b0, S' ~ P.

    States are one-hot encoded; behavior probabilities are logged in ``bp``.
    """
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    b = _policy_table(behavior, S)
    dist = mdp.initial_distribution if state_distribution is None else np.asarray(state_distribution)
    s = rng.choice(S, size=n, p=dist)
    u = rng.random(n)
    a = np.minimum((np.cumsum(b[s], axis=1) < u[:, None]).sum(axis=1), A - 1)
    cum = np.cumsum(mdp.transition[s, a], axis=1)
    u2 = rng.random(n)
    sn = np.minimum((cum < u2[:, None]).sum(axis=1), S - 1)
    r = mdp.reward[s, a]
    if reward_noise > 0:
        r = r + reward_noise * rng.standard_normal(n)
    return TransitionDataset(
        one_hot(s, S),
        a,
        r,
        one_hot(sn, S),
        np.zeros(n, dtype=bool),
        num_actions=A,
        seed=seed,
        bp=b[s],
    )


@dataclass(frozen=True)
class TabularEnv:
    """Vectorized simulator over one-hot tabular states (for Monte Carlo checks)."""

    mdp: TabularMDP
    n_uniforms: int = 1
    max_steps: int | None = None
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_cum", np.cumsum(self.mdp.transition, axis=2))

    @property
    def reward_bound(self) -> float:
        return float(np.max(np.abs(self.mdp.reward)))

    @property
    def num_actions(self) -> int:
        return self.mdp.num_actions

    def step(self, states: np.ndarray, actions: np.ndarray, u: np.ndarray):
        s = state_index(states)
        cum = self._cum[s, actions]
        sn = np.minimum((cum < u[:, :1]).sum(axis=1), self.mdp.num_states - 1)
        r = self.mdp.reward[s, actions]
        return one_hot(sn, self.mdp.num_states), r, np.zeros(s.shape[0], dtype=bool)
