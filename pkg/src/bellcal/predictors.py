"""Value predictors: a base state->real model optionally composed with a 1-D calibrator."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .calibrators import PiecewiseConstant
from .mdp import state_index
from .regressors import LinearModel, StumpEnsemble, model_from_dict


@dataclass(frozen=True)
class ConstantValue:
    c: float = 0.0

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(states).shape[0], float(self.c))

    def to_dict(self) -> dict:
        return {"kind": "constant", "c": float(self.c)}


@dataclass(frozen=True)
class TabularValue:
    """Lookup table over one-hot encoded tabular states."""

    values: np.ndarray

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(self.values, dtype=float)[state_index(states)]

    def to_dict(self) -> dict:
        return {"kind": "tabular", "values": np.asarray(self.values).tolist()}


@dataclass(frozen=True)
class RegressionValue:
    """A fitted linear or stump model applied to raw state features."""

    model: LinearModel | StumpEnsemble

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return self.model.predict(np.atleast_2d(states))

    def to_dict(self) -> dict:
        return {"kind": "regression", "model": self.model.to_dict()}


@dataclass(frozen=True)
class FunctionValue:
    """Arbitrary vectorized function of states; not serializable."""

    fn: Callable[[np.ndarray], np.ndarray]
    name: str = "function"

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(states)), dtype=float).reshape(-1)

    def to_dict(self) -> dict:
        raise TypeError(f"FunctionValue {self.name!r} cannot be serialized")


def base_from_dict(d: dict):
    kind = d["kind"]
    if kind == "constant":
        return ConstantValue(d["c"])
    if kind == "tabular":
        return TabularValue(np.array(d["values"], dtype=float))
    if kind == "regression":
        return RegressionValue(model_from_dict(d["model"]))
    raise ValueError(f"unknown base model kind {kind!r}")


@dataclass(frozen=True)
class ValuePredictor:
    """Prediction is ``calibrator(base(s))`` when a calibrator is attached, else ``base(s)``."""

    base: Callable[[np.ndarray], np.ndarray]
    calibrator: PiecewiseConstant | None = None

    def base_predict(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(self.base(np.atleast_2d(states)), dtype=float).reshape(-1)

    def predict(self, states: np.ndarray) -> np.ndarray:
        raw = self.base_predict(states)
        if self.calibrator is None:
            return raw
        return self.calibrator(raw)

    __call__ = predict

    def with_calibrator(self, theta: PiecewiseConstant | None) -> "ValuePredictor":
        return replace(self, calibrator=theta)

    def to_dict(self, config: dict | None = None) -> dict:
        return {
            "base_model": self.base.to_dict(),
            "calibrator": None if self.calibrator is None else self.calibrator.to_dict(),
            "config": config or {},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValuePredictor":
        cal = d.get("calibrator")
        return cls(
            base_from_dict(d["base_model"]),
            None if cal is None else PiecewiseConstant.from_dict(cal),
        )
