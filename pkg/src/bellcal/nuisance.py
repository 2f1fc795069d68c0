"""Nuisance models for the doubly robust Bellman target and the train/calibration split."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .errors import FoldError, NegativeWeight, OverlapViolation
from .mdp import TransitionDataset, state_index
from .regressors import MultinomialLogit, RidgeSolver, fit_boosted_stumps

DEFAULT_WEIGHT_CLIP = 50.0


class NuisanceMode(str, Enum):
    EXACT_WEIGHTS = "exact_weights"
    ESTIMATED_WEIGHTS = "estimated_weights"
    IW_ONLY = "iw_only"


@dataclass(frozen=True)
class Fold:
    """A dataset tagged with the side of the sample split it came from."""

    data: TransitionDataset
    tag: str

    def __post_init__(self):
        if self.tag not in ("train", "calibration"):
            raise ValueError(f"unknown fold tag {self.tag!r}")

    def __len__(self) -> int:
        return len(self.data)


def require_train(fold) -> TransitionDataset:
    if not isinstance(fold, Fold) or fold.tag != "train":
        raise FoldError("nuisance and base models may only be fit on a fold tagged 'train'")
    return fold.data


def split_by_customer(
    data: TransitionDataset,
    train_fraction: float = 0.5,
    seed: int = 0,
    unsafe_no_split: bool = False,
) -> tuple[Fold, Fold]:
    """Split transitions into train/calibration folds by trajectory id.

    With ``unsafe_no_split`` both folds hold the full dataset, which breaks the
    independence between nuisances and calibration data.
    """
    if unsafe_no_split:
        return Fold(data, "train"), Fold(data, "calibration")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1); use unsafe_no_split to skip splitting")
    ids = data.cid if data.cid is not None else np.arange(len(data))
    uniq = np.unique(ids)
    rng = np.random.default_rng([seed, 7])
    perm = rng.permutation(uniq)
    n_train = int(round(train_fraction * uniq.size))
    n_train = min(max(n_train, 1), uniq.size - 1) if uniq.size > 1 else 1
    train_ids = np.sort(perm[:n_train])
    mask = np.isin(ids, train_ids)
    if mask.all() or not mask.any():
        raise ValueError("split produced an empty fold; need at least two trajectories")
    return Fold(data.subset(np.flatnonzero(mask)), "train"), Fold(data.subset(np.flatnonzero(~mask)), "calibration")


def clip_weights(w, M_w: float = DEFAULT_WEIGHT_CLIP):
    arr = np.asarray(w, dtype=float)
    if np.any(arr < 0):
        raise NegativeWeight("importance weights must be nonnegative")
    out = np.minimum(arr, M_w)
    return float(out) if np.ndim(out) == 0 else out


def exact_ratios(pi_probs: np.ndarray, bp: np.ndarray, actions: np.ndarray) -> np.ndarray:
    idx = np.arange(actions.shape[0])
    num = pi_probs[idx, actions]
    den = bp[idx, actions]
    bad = (den == 0) & (num > 0)
    if np.any(bad):
        raise OverlapViolation(f"{int(bad.sum())} logged actions have b0(a|s)=0 but pi(a|s)>0")
    out = np.zeros_like(num)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass(frozen=True)
class NuisanceModels:
    """Weights, reward model and next-value model entering the DR target.

    ``weight_model(states, actions, pi_probs)`` returns unclipped ratio
    estimates; in exact-weights mode the ratio comes from the logged behavior
    probabilities instead.  ``reward_model(states)`` and the callables produced
    by ``next_value_model(v)`` return ``(n, num_actions)`` arrays.
    """

    mode: NuisanceMode = NuisanceMode.EXACT_WEIGHTS
    weight_clip: float = DEFAULT_WEIGHT_CLIP
    weight_model: Callable | None = None
    reward_model: Callable | None = None
    next_value_model: Callable | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "mode", NuisanceMode(self.mode))

    def weights(self, data: TransitionDataset, pi_probs: np.ndarray) -> np.ndarray:
        if self.weight_model is not None:
            w = np.asarray(self.weight_model(data.states, data.actions, pi_probs), dtype=float)
        elif data.bp is not None:
            w = exact_ratios(pi_probs, data.bp, data.actions)
        else:
            raise ValueError("no weight model and no logged behavior probabilities ('bp')")
        return clip_weights(w, self.weight_clip)

    def reward(self, states: np.ndarray, num_actions: int) -> np.ndarray:
        if self.mode is NuisanceMode.IW_ONLY or self.reward_model is None:
            return np.zeros((np.atleast_2d(states).shape[0], num_actions))
        return np.asarray(self.reward_model(states), dtype=float)

    def next_value(self, v, states: np.ndarray, num_actions: int) -> np.ndarray:
        if self.mode is NuisanceMode.IW_ONLY or self.next_value_model is None:
            return np.zeros((np.atleast_2d(states).shape[0], num_actions))
        return np.asarray(self.next_value_model(v)(states), dtype=float)


@dataclass(frozen=True)
class BehaviorModel:
    logit: MultinomialLogit

    @property
    def num_actions(self) -> int:
        return self.logit.num_actions

    @property
    def degenerate(self) -> bool:
        return self.logit.degenerate

    def probs(self, states: np.ndarray) -> np.ndarray:
        return self.logit.probs(states)

    def ratio(self, states, actions, pi_probs) -> np.ndarray:
        b = self.probs(states)[np.arange(actions.shape[0]), actions]
        return pi_probs[np.arange(actions.shape[0]), actions] / b


def fit_behavior_policy(train: Fold) -> BehaviorModel:
    """Multinomial logistic model of the logged actions.

    Unobserved actions get probability at the floor and set ``degenerate``.
    """
    data = require_train(train)
    model = MultinomialLogit(data.num_actions).fit(data.states, data.actions)
    return BehaviorModel(model)


def _fit_one(kind: str, X: np.ndarray, y: np.ndarray):
    if kind == "linear_ridge":
        return RidgeSolver(X).fit(y)
    if kind == "boosted_stumps":
        return fit_boosted_stumps(X, y)
    raise ValueError(f"unknown regressor {kind!r}")


@dataclass(frozen=True)
class PerActionModel:
    """One regression per action; empty strata fall back to a constant."""

    models: tuple
    fallback: float
    clip: float | None = None

    def __call__(self, states: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(states)
        cols = []
        for m in self.models:
            cols.append(np.full(S.shape[0], self.fallback) if m is None else m.predict(S))
        out = np.column_stack(cols)
        if self.clip is not None:
            out = np.clip(out, -self.clip, self.clip)
        return out


def fit_reward_model(train: Fold, regressor: str = "linear_ridge") -> PerActionModel:
    data = require_train(train)
    fallback = float(data.rewards.mean())
    models = []
    for a in range(data.num_actions):
        m = data.actions == a
        models.append(_fit_one(regressor, data.states[m], data.rewards[m]) if m.any() else None)
    return PerActionModel(tuple(models), fallback)


class NextValueRegression:
    """Regresses ``v(S')`` (zero after absorption) on state features per action.

    Calling the object with a value predictor returns the fitted ``P-hat v``;
    ridge factorisations are cached across calls.
    """

    def __init__(self, train: Fold, regressor: str = "linear_ridge"):
        self.data = require_train(train)
        self.regressor = regressor
        self._masks = [self.data.actions == a for a in range(self.data.num_actions)]
        self._solvers = None
        if regressor == "linear_ridge":
            self._solvers = [RidgeSolver(self.data.states[m]) if m.any() else None for m in self._masks]
        elif regressor != "boosted_stumps":
            raise ValueError(f"unknown regressor {regressor!r}")

    def targets(self, v) -> np.ndarray:
        vals = np.asarray(v(self.data.next_states), dtype=float)
        return np.where(self.data.dones, 0.0, vals)

    def fit_targets(self, y: np.ndarray) -> PerActionModel:
        M = 1.5 * float(np.max(np.abs(y))) if y.size else 0.0
        models = []
        for a, m in enumerate(self._masks):
            if not m.any():
                models.append(None)
            elif self._solvers is not None:
                models.append(self._solvers[a].fit(y[m]))
            else:
                models.append(fit_boosted_stumps(self.data.states[m], y[m]))
        return PerActionModel(tuple(models), float(y.mean()), clip=M)

    def __call__(self, v) -> PerActionModel:
        return self.fit_targets(self.targets(v))


def fit_next_value_model(train: Fold, v, regressor: str = "linear_ridge") -> PerActionModel:
    return NextValueRegression(train, regressor)(v)


def build_nuisance(
    train: Fold,
    mode: NuisanceMode | str = NuisanceMode.EXACT_WEIGHTS,
    regressor: str = "linear_ridge",
    weight_clip: float = DEFAULT_WEIGHT_CLIP,
) -> NuisanceModels:
    """Fit every nuisance the chosen mode needs on the training fold."""
    mode = NuisanceMode(mode)
    data = require_train(train)
    meta: dict = {"mode": mode.value, "regressor": regressor, "n_train": len(data)}
    weight_model = None
    if mode is NuisanceMode.ESTIMATED_WEIGHTS or (mode is NuisanceMode.IW_ONLY and data.bp is None):
        behavior = fit_behavior_policy(train)
        meta["degenerate_actions"] = behavior.degenerate
        weight_model = behavior.ratio
    elif data.bp is None:
        raise ValueError("exact_weights mode needs logged behavior probabilities ('bp')")
    if mode is NuisanceMode.IW_ONLY:
        return NuisanceModels(mode, weight_clip, weight_model, metadata=meta)
    return NuisanceModels(
        mode,
        weight_clip,
        weight_model,
        fit_reward_model(train, regressor),
        NextValueRegression(train, regressor),
        meta,
    )


def tabular_nuisance(
    transition: np.ndarray,
    reward_table: np.ndarray,
    weight_table: np.ndarray | None = None,
    mode: NuisanceMode | str = NuisanceMode.EXACT_WEIGHTS,
    weight_clip: float = np.inf,
) -> NuisanceModels:
    """Nuisances given as explicit tables over one-hot tabular states.

    ``transition`` is the (possibly wrong) kernel P-hat[s, a, s'] and
    ``reward_table`` the reward model r-hat[s, a].  ``weight_table`` gives
    w-hat[s, a]; without it the logged behavior probabilities are used.
    """
    P = np.asarray(transition, dtype=float)
    r = np.asarray(reward_table, dtype=float)
    S = r.shape[0]
    eye = np.eye(S)

    def reward_model(states):
        return r[state_index(states)]

    def next_value_model(v):
        pv = np.einsum("sat,t->sa", P, np.asarray(v(eye), dtype=float))
        return lambda states: pv[state_index(states)]

    weight_model = None
    if weight_table is not None:
        wt = np.asarray(weight_table, dtype=float)

        def weight_model(states, actions, pi_probs):
            return wt[state_index(states), actions]

    return NuisanceModels(mode, weight_clip, weight_model, reward_model, next_value_model)
