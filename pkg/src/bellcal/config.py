"""Experiment configuration: one JSON file with named sections, all optional."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .calibration import CalibrationConfig
from .crm import CrmParams
from .nuisance import DEFAULT_WEIGHT_CLIP, NuisanceMode

METHODS = ("raw", "isotonic", "histogram", "hybrid")
REGRESSORS = ("linear_ridge", "boosted_stumps")


class ConfigError(ValueError):
    pass


# the CRM harness regularizes isotonic fits; the library default is plain PAVA
HARNESS_CALIBRATION = {"min_block_size": "auto"}


def harness_calibration(d: dict | None = None) -> CalibrationConfig:
    return CalibrationConfig.from_dict({**HARNESS_CALIBRATION, **(d or {})})


def _as_list(x) -> list:
    if x is None:
        return []
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _section(cls, d: dict | None, name: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


@dataclass(frozen=True)
class DataSection:
    n_cust: int = 10_000
    horizon: int = 24
    seeds: tuple = tuple(range(1, 11))

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in _as_list(self.seeds)))
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.n_cust < 2 or self.horizon < 1:
            raise ValueError("need n_cust >= 2 and horizon >= 1")


@dataclass(frozen=True)
class SplitSection:
    train_fraction: float = 0.5
    by: str = "customer"
    unsafe_no_split: bool = False

    def __post_init__(self):
        if self.by != "customer":
            raise ValueError("only customer-level splitting is supported")
        if self.train_fraction == 0:
            object.__setattr__(self, "unsafe_no_split", True)
        elif not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1), or be 0 for the unsafe no-split variant")


@dataclass(frozen=True)
class BaseSection:
    regressor: tuple = ("linear_ridge",)
    iters: int = 50
    snapshot_at: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "regressor", tuple(_as_list(self.regressor)))
        object.__setattr__(self, "snapshot_at", tuple(int(s) for s in _as_list(self.snapshot_at)))
        for r in self.regressor:
            if r not in REGRESSORS:
                raise ValueError(f"unknown regressor {r!r}")
        if self.iters < 1 or any(s < 1 for s in self.snapshot_at):
            raise ValueError("iters and snapshots must be >= 1")

    def models(self) -> list[tuple[str, str, int]]:
        """(label, regressor, fvi iterations) for every base model to fit."""
        out = []
        for r in self.regressor:
            if self.snapshot_at:
                out += [(f"{r}@{k}", r, k) for k in self.snapshot_at]
            else:
                out.append((r, r, self.iters))
        return out


@dataclass(frozen=True)
class NuisanceSection:
    mode: str = NuisanceMode.EXACT_WEIGHTS.value
    regressor: str = "linear_ridge"
    weight_clip: float = DEFAULT_WEIGHT_CLIP

    def __post_init__(self):
        NuisanceMode(self.mode)
        if self.regressor not in REGRESSORS:
            raise ValueError(f"unknown regressor {self.regressor!r}")
        if self.weight_clip <= 0:
            raise ValueError("weight_clip must be positive")


@dataclass(frozen=True)
class EvalSection:
    n_rollouts: int = 100
    horizon_eff: int = 61
    n_initial_states: int = 500
    B_eval: int | None = None
    n_eval_cust: int = 5_000
    policy: str = "target"
    methods: tuple = METHODS

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(_as_list(self.methods)))
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.policy not in ("target", "behavior"):
            raise ValueError("policy must be 'target' or 'behavior'")
        if self.n_rollouts < 1 or self.n_initial_states < 1 or self.n_eval_cust < 2:
            raise ValueError("evaluation sizes must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    crm: CrmParams = field(default_factory=CrmParams)
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    base: BaseSection = field(default_factory=BaseSection)
    calibration: CalibrationConfig = field(default_factory=harness_calibration)
    nuisance: NuisanceSection = field(default_factory=NuisanceSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def gamma(self) -> float:
        return self.crm.discount

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            crm = CrmParams.from_dict(d.get("crm"))
            cal = harness_calibration(d.get("calibration"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(
            crm=crm,
            data=_section(DataSection, d.get("data"), "data"),
            split=_section(SplitSection, d.get("split"), "split"),
            base=_section(BaseSection, d.get("base"), "base"),
            calibration=cal,
            nuisance=_section(NuisanceSection, d.get("nuisance"), "nuisance"),
            eval=_section(EvalSection, d.get("eval"), "eval"),
        )

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        def plain(x):
            return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(x).items()}

        return {
            "crm": self.crm.to_dict(),
            "data": plain(self.data),
            "split": plain(self.split),
            "base": plain(self.base),
            "calibration": self.calibration.to_dict(),
            "nuisance": plain(self.nuisance),
            "eval": plain(self.eval),
        }

    def override(self, section: str, **values) -> "ExperimentConfig":
        """Copy with non-None ``values`` replacing keys of ``section``."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        try:
            return replace(self, **{section: replace(current, **values)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {section!r}: {exc}") from exc
