"""Synthetic customer-relationship-management MDP.

State vector layout: ``[tenure, engagement, fatigue, value_segment,
price_sensitivity, active]``.  Actions: 0 no promotion, 1 light, 2 strong.

Randomness is drawn as uniforms only, one independent stream per unit
(customer or initial state), so vectorized simulation and step-by-step
replay consume identical numbers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit, ndtri, softmax

from .errors import TruncationTooLoose
from .mdp import TransitionDataset, one_hot

TENURE, ENGAGEMENT, FATIGUE, VALUE, SENSITIVITY, ACTIVE = range(6)
STATE_DIM = 6
NUM_ACTIONS = 3
NO_PROMO, LIGHT, STRONG = 0, 1, 2

# RNG stream namespaces (second element of the seed sequence)
STREAM_DATA = 0
STREAM_INITIAL = 1
STREAM_EVAL_DATA = 2
STREAM_ROLLOUT = 3


@dataclass(frozen=True)
class CrmParams:
    # logit(churn) = c0 + c_tenure*tenure + c_eng*engagement + c_fat*fatigue + offset[a]
    churn_logit_coeffs: tuple = (-2.05, -0.02, -1.2, 1.6, 0.0, -0.15, -0.35)
    # logit(visit) = v0 + v_eng*engagement + v_fat*fatigue + offset[a]
    visit_logit_coeffs: tuple = (-0.4, 2.4, -1.8, 0.0, 0.35, 0.8)
    uplift_per_action: tuple = (1.0, 1.15, 1.4)
    discount_cost: tuple = (0.0, 0.15, 0.35)
    revenue_lognormal_sigma: float = 0.3
    engagement_decay: float = 0.95
    engagement_boost: tuple = (0.0, 0.05, 0.12)
    fatigue_increment: tuple = (0.0, 0.06, 0.15)
    fatigue_decay: float = 0.85
    discount: float = 0.99
    max_tenure: int = 60
    # initial-state sampler
    engagement_range: tuple = (0.2, 0.9)
    fatigue_range: tuple = (0.0, 0.3)
    value_log_mean: float = 0.0
    value_log_sd: float = 0.5
    # behavior policy: score(no) = b_sup*eng*fat; score(light) = b_light;
    # score(strong) = b_strong + b_target*(1-eng)*sigmoid(2*log(value))
    behavior_coeffs: tuple = (4.0, 1.0, -1.0, 2.5)
    overlap_floor: float = 0.02
    # target policy thresholds
    low_engagement: float = 0.35
    high_sensitivity: float = 0.6
    high_engagement: float = 0.7
    high_value_quantile: float = 0.75
    churn_override: float | None = None

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, list):
                object.__setattr__(self, f.name, tuple(val))
        for name in ("churn_logit_coeffs", "visit_logit_coeffs", "uplift_per_action", "discount_cost",
                     "engagement_boost", "fatigue_increment", "behavior_coeffs"):
            if not np.all(np.isfinite(np.asarray(getattr(self, name), dtype=float))):
                raise ValueError(f"{name} must be finite")
        if len(self.churn_logit_coeffs) != 4 + NUM_ACTIONS or len(self.visit_logit_coeffs) != 3 + NUM_ACTIONS:
            raise ValueError("logit coefficient vectors have the wrong length")
        for name in ("uplift_per_action", "discount_cost", "engagement_boost", "fatigue_increment"):
            if len(getattr(self, name)) != NUM_ACTIONS:
                raise ValueError(f"{name} needs one entry per action")
        if self.revenue_lognormal_sigma <= 0:
            raise ValueError("revenue_lognormal_sigma must be > 0")
        for name in ("engagement_decay", "fatigue_decay"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if not 0.0 <= self.overlap_floor * NUM_ACTIONS < 1.0:
            raise ValueError("overlap_floor too large")

    @property
    def high_value(self) -> float:
        return float(np.exp(self.value_log_mean + self.value_log_sd * ndtri(self.high_value_quantile)))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "CrmParams":
        d = d or {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown crm parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CrmState:
    tenure: int = 0
    engagement: float = 0.5
    fatigue: float = 0.0
    value_segment: float = 1.0
    price_sensitivity: float = 0.5
    active: bool = True

    def __post_init__(self):
        if not 0 <= self.tenure <= 60:
            raise ValueError("tenure must lie in 0..60")
        if self.value_segment <= 0:
            raise ValueError("value_segment must be positive")
        for name in ("engagement", "fatigue", "price_sensitivity"):
            object.__setattr__(self, name, float(np.clip(getattr(self, name), 0.0, 1.0)))

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.tenure, self.engagement, self.fatigue, self.value_segment, self.price_sensitivity,
             1.0 if self.active else 0.0]
        )

    @classmethod
    def from_vector(cls, x) -> "CrmState":
        x = np.asarray(x, dtype=float)
        return cls(int(round(x[TENURE])), x[ENGAGEMENT], x[FATIGUE], x[VALUE], x[SENSITIVITY], bool(x[ACTIVE] > 0.5))


# --------------------------------------------------------------------------
# vectorized dynamics


def step_arrays(states: np.ndarray, actions: np.ndarray, params: CrmParams, u: np.ndarray):
    """One month for a batch; ``u`` holds uniforms (churn, visit, revenue noise) per row.

    Returns ``(next_states, rewards, done)`` where ``done`` flags rows that
    were active and became absorbing.  Inactive rows are returned unchanged
    with zero reward.
    """
    S = np.atleast_2d(np.asarray(states, dtype=float))
    a = np.asarray(actions, dtype=np.int64).reshape(-1)
    u = np.atleast_2d(u)
    tenure, eng, fat, val, sens, act = (S[:, j] for j in range(STATE_DIM))
    active = act > 0.5

    c = params.churn_logit_coeffs
    p_churn = expit(c[0] + c[1] * tenure + c[2] * eng + c[3] * fat + np.asarray(c[4:])[a])
    if params.churn_override is not None:
        p_churn = np.full_like(p_churn, params.churn_override)
    vc = params.visit_logit_coeffs
    p_visit = expit(vc[0] + vc[1] * eng + vc[2] * fat + np.asarray(vc[3:])[a])

    churn = u[:, 0] < p_churn
    visit = u[:, 1] < p_visit
    noise = np.exp(params.revenue_lognormal_sigma * ndtri(u[:, 2]))
    uplift = np.asarray(params.uplift_per_action)[a]
    cost = np.asarray(params.discount_cost)[a]
    revenue = visit * val * uplift * (1.0 - sens * cost) * noise

    promo = a > 0
    eng_next = np.clip(eng * params.engagement_decay + np.asarray(params.engagement_boost)[a] * (visit & promo), 0, 1)
    fat_next = np.clip(
        np.where(promo, fat + np.asarray(params.fatigue_increment)[a], fat * params.fatigue_decay), 0, 1
    )
    ten_next = np.minimum(tenure + 1, params.max_tenure)
    still = ~churn & (tenure + 1 < params.max_tenure)

    nxt = np.column_stack([ten_next, eng_next, fat_next, val, sens, still.astype(float)])
    nxt = np.where(active[:, None], nxt, S)
    rewards = np.where(active, revenue, 0.0)
    done = active & ~still
    return nxt, rewards, done


def behavior_probs(states: np.ndarray, params: CrmParams = CrmParams()) -> np.ndarray:
    S = np.atleast_2d(np.asarray(states, dtype=float))
    eng, fat, val = S[:, ENGAGEMENT], S[:, FATIGUE], S[:, VALUE]
    b_sup, b_light, b_strong, b_target = params.behavior_coeffs
    scores = np.column_stack(
        [
            b_sup * eng * fat,
            np.full(S.shape[0], b_light),
            b_strong + b_target * (1.0 - eng) * expit(2.0 * np.log(val)),
        ]
    )
    floor = params.overlap_floor
    return floor + (1.0 - NUM_ACTIONS * floor) * softmax(scores, axis=1)


def target_actions(states: np.ndarray, params: CrmParams = CrmParams()) -> np.ndarray:
    """Aggressive target rule; states exactly at a threshold get the light promotion."""
    S = np.atleast_2d(np.asarray(states, dtype=float))
    eng, val, sens = S[:, ENGAGEMENT], S[:, VALUE], S[:, SENSITIVITY]
    strong = (eng < params.low_engagement) & (sens > params.high_sensitivity)
    none = (eng > params.high_engagement) & (val > params.high_value)
    return np.where(strong, STRONG, np.where(none, NO_PROMO, LIGHT))


@dataclass(frozen=True)
class BehaviorPolicy:
    params: CrmParams = CrmParams()
    num_actions: int = NUM_ACTIONS

    def probs(self, states):
        return behavior_probs(states, self.params)


@dataclass(frozen=True)
class TargetPolicy:
    params: CrmParams = CrmParams()
    num_actions: int = NUM_ACTIONS

    def probs(self, states):
        return one_hot(target_actions(states, self.params), NUM_ACTIONS)


def sample_action(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one action per row."""
    probs = np.atleast_2d(probs)
    cum = np.cumsum(probs, axis=1)
    return np.minimum((cum < np.reshape(u, (-1, 1))).sum(axis=1), probs.shape[1] - 1)


# --------------------------------------------------------------------------
# scalar API


def _as_vector(state) -> np.ndarray:
    return state.to_vector() if isinstance(state, CrmState) else np.asarray(state, dtype=float)


def crm_step(state, action: int, params: CrmParams, rng: np.random.Generator):
    """Advance one customer one month; draws three uniforms from ``rng``."""
    u = rng.random(3)
    nxt, r, _ = step_arrays(_as_vector(state)[None, :], [action], params, u[None, :])
    out = CrmState.from_vector(nxt[0]) if isinstance(state, CrmState) else nxt[0]
    return out, float(r[0])


def behavior_action(state, rng: np.random.Generator, params: CrmParams = CrmParams()):
    """Sample a behavior action (one uniform) and return it with the full probability vector."""
    p = behavior_probs(_as_vector(state)[None, :], params)[0]
    a = int(sample_action(p[None, :], np.array([rng.random()]))[0])
    return a, p


def target_action(state, params: CrmParams = CrmParams()) -> int:
    return int(target_actions(_as_vector(state)[None, :], params)[0])


def initial_states_from_uniforms(u: np.ndarray, params: CrmParams) -> np.ndarray:
    u = np.atleast_2d(u)
    lo_e, hi_e = params.engagement_range
    lo_f, hi_f = params.fatigue_range
    n = u.shape[0]
    return np.column_stack(
        [
            np.zeros(n),
            lo_e + (hi_e - lo_e) * u[:, 0],
            lo_f + (hi_f - lo_f) * u[:, 1],
            np.exp(params.value_log_mean + params.value_log_sd * ndtri(u[:, 2])),
            u[:, 3],
            np.ones(n),
        ]
    )


def initial_state(rng: np.random.Generator, params: CrmParams = CrmParams()) -> np.ndarray:
    return initial_states_from_uniforms(rng.random(4)[None, :], params)[0]


def unit_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


def sample_initial_states(params: CrmParams, n: int, seed: int) -> np.ndarray:
    u = np.array([unit_rng(seed, STREAM_INITIAL, i).random(4) for i in range(n)])
    return initial_states_from_uniforms(u, params)


def simulate_dataset(
    params: CrmParams, n_cust: int, horizon: int, seed: int, stream: int = STREAM_DATA
) -> TransitionDataset:
    """Simulate customers under the behavior policy and log every active-state transition.

    Customer ``i`` draws from its own stream ``(seed, stream, i)``: four
    uniforms for the initial state, then four per month (action, churn, visit,
    revenue noise).  Transitions are ordered by customer, then month, and
    carry the behavior probabilities (``bp``) and customer id (``cid``).
    """
    if n_cust < 1 or horizon < 1:
        raise ValueError("n_cust and horizon must be >= 1")
    init_u = np.empty((n_cust, 4))
    step_u = np.empty((n_cust, horizon, 4))
    for i in range(n_cust):
        g = unit_rng(seed, stream, i)
        init_u[i] = g.random(4)
        step_u[i] = g.random((horizon, 4))
    S = initial_states_from_uniforms(init_u, params)
    cols = {k: [] for k in ("s", "a", "r", "sn", "done", "bp", "cid", "t")}
    ids = np.arange(n_cust)
    for t in range(horizon):
        active = S[:, ACTIVE] > 0.5
        if not active.any():
            break
        rows = ids[active]
        St = S[rows]
        bp = behavior_probs(St, params)
        a = sample_action(bp, step_u[rows, t, 0])
        nxt, r, done = step_arrays(St, a, params, step_u[rows, t, 1:])
        for k, v in (("s", St), ("a", a), ("r", r), ("sn", nxt), ("done", done), ("bp", bp),
                     ("cid", rows), ("t", np.full(rows.size, t))):
            cols[k].append(v)
        S[rows] = nxt
    cid = np.concatenate(cols["cid"])
    order = np.lexsort((np.concatenate(cols["t"]), cid))
    return TransitionDataset(
        np.concatenate(cols["s"])[order],
        np.concatenate(cols["a"])[order],
        np.concatenate(cols["r"])[order],
        np.concatenate(cols["sn"])[order],
        np.concatenate(cols["done"])[order],
        num_actions=NUM_ACTIONS,
        seed=seed,
        bp=np.concatenate(cols["bp"])[order],
        cid=cid[order],
    )


@dataclass(frozen=True)
class CrmEnv:
    """Batch simulator adapter used by the Monte Carlo routine."""

    params: CrmParams = CrmParams()
    n_uniforms: int = 3
    num_actions: int = NUM_ACTIONS
    reward_bound: float | None = None

    @property
    def max_steps(self) -> int:
        # every customer is absorbed after at most max_tenure months
        return self.params.max_tenure

    def step(self, states, actions, u):
        return step_arrays(states, actions, self.params, u)


@dataclass
class MonteCarloResult:
    values: np.ndarray
    std_errors: np.ndarray
    n_rollouts: int = 0
    horizon: int = 0
    meta: dict = field(default_factory=dict)


def _policy_probs(pi, states, num_actions):
    if hasattr(pi, "probs"):
        return np.asarray(pi.probs(states), dtype=float)
    acts = np.array([pi(s) for s in states], dtype=np.int64)
    return one_hot(acts, num_actions)


def monte_carlo_value(
    env,
    pi,
    initial_states,
    gamma: float,
    n_rollouts: int,
    horizon_eff: int,
    seed: int,
    tol: float = 1e-6,
) -> MonteCarloResult:
    """Average truncated discounted return over independent rollouts from each initial state.

    ``env`` is a simulator (``CrmEnv``, ``TabularEnv``) or ``CrmParams``.  The
    truncation is accepted when it is exact (the environment always absorbs
    within ``horizon_eff`` steps, or ``gamma == 0``) or when
    ``gamma**horizon_eff * R_max / (1 - gamma) < tol``.
    """
    if isinstance(env, CrmParams):
        env = CrmEnv(env)
    S0 = np.atleast_2d(np.asarray([_as_vector(s) for s in initial_states], dtype=float))
    exact = gamma == 0.0 or (getattr(env, "max_steps", None) is not None and horizon_eff >= env.max_steps)
    if not exact:
        bound = getattr(env, "reward_bound", None)
        if bound is None or gamma**horizon_eff * bound / (1.0 - gamma) >= tol:
            raise TruncationTooLoose(
                f"horizon_eff={horizon_eff} does not bound the discounted tail below tol={tol}"
            )
    m = S0.shape[0]
    gens = [unit_rng(seed, STREAM_ROLLOUT, j) for j in range(m)]
    S = np.repeat(S0, n_rollouts, axis=0)
    ret = np.zeros(m * n_rollouts)
    k = env.num_actions
    disc = 1.0
    for _ in range(horizon_eff):
        u = np.concatenate([g.random((n_rollouts, 1 + env.n_uniforms)) for g in gens])
        a = sample_action(_policy_probs(pi, S, k), u[:, 0])
        S, r, _ = env.step(S, a, u[:, 1:])
        ret += disc * r
        disc *= gamma
        if disc == 0.0:
            break
        if S.shape[1] == STATE_DIM and isinstance(env, CrmEnv) and not np.any(S[:, ACTIVE] > 0.5):
            break
    per = ret.reshape(m, n_rollouts)
    se = per.std(axis=1, ddof=1) / np.sqrt(n_rollouts) if n_rollouts > 1 else np.zeros(m)
    return MonteCarloResult(per.mean(axis=1), se, n_rollouts, horizon_eff)
