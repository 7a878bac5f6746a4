"""Declarative scenario configuration (YAML) with strict validation.

Seeds are mandatory. Unknown keys, missing required keys and type mismatches
are rejected with an error that names the offending key.
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = ["ConfigError", "ScenarioConfig", "load_scenario", "resolved_yaml"]


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=False, frozen=False)


# --- bandit policies -------------------------------------------------------


class LinUCBConfig(_Strict):
    type: Literal["linucb"] = "linucb"
    label: Optional[str] = None
    alpha: float = 1.0
    ridge: float = Field(1.0, gt=0)


class ThompsonConfig(_Strict):
    type: Literal["thompson"] = "thompson"
    label: Optional[str] = None
    noise_var: float = Field(1.0, gt=0)
    prior_scale: float = Field(1.0, gt=0)


class EkfConfig(_Strict):
    type: Literal["ekf"] = "ekf"
    label: Optional[str] = None
    process_var: float = Field(0.0, ge=0)
    obs_var: float = Field(1.0, gt=0)
    prior_scale: float = Field(1.0, gt=0)
    link: Literal["identity", "sigmoid"] = "identity"


class NeuralLinearConfig(_Strict):
    type: Literal["neural-linear"] = "neural-linear"
    label: Optional[str] = None
    hidden: list[int] = [32, 32]
    prior_scale: float = Field(1.0, gt=0)
    a0: float = Field(1.0, gt=0)
    b0: float = Field(1.0, gt=0)
    replay_capacity: int = Field(1000, ge=0)
    retrain_every: int = Field(100, ge=0)
    step_size: float = Field(0.05, gt=0)
    epochs: int = Field(200, ge=0)


class RandomConfig(_Strict):
    type: Literal["random"] = "random"
    label: Optional[str] = None


class OracleConfig(_Strict):
    type: Literal["oracle"] = "oracle"
    label: Optional[str] = None


PolicyConfig = Annotated[
    Union[LinUCBConfig, ThompsonConfig, EkfConfig, NeuralLinearConfig, RandomConfig, OracleConfig],
    Field(discriminator="type"),
]


def _default_policies():
    return [LinUCBConfig(), ThompsonConfig(), RandomConfig()]


class BanditSimConfig(_Strict):
    theta: list[list[float]]
    noise_sd: float = Field(0.5, ge=0)
    context: Literal["normal", "uniform", "ones"] = "normal"
    horizon: int = Field(1000, ge=0)
    record_every: int = Field(1, ge=1)
    policies: list[PolicyConfig] = Field(default_factory=_default_policies)

    @field_validator("theta")
    @classmethod
    def _rectangular(cls, v):
        if not v or len({len(row) for row in v}) != 1 or not v[0]:
            raise ValueError("theta must be a non-empty rectangular matrix (arms x features)")
        return v


# --- restless bandits -------------------------------------------------------


class ArmTemplate(_Strict):
    name: str
    passive: tuple[float, float]
    active: tuple[float, float]
    count: int = Field(1, ge=0)
    group: str = "all"
    rewards: tuple[float, float] = (0.0, 1.0)


class RmabSimConfig(_Strict):
    templates: list[ArmTemplate]
    budget: int = Field(ge=0)
    horizon: int = Field(100, ge=0)
    discount: float = Field(0.9, gt=0, lt=1)
    initial_state: Literal["alternate", "good", "bad", "random"] = "alternate"
    allocators: list[Literal["whittle", "whittle-learned", "equitable", "random"]] = ["whittle", "random"]
    equity: Optional[Union[float, dict[str, float]]] = None
    record_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        n = sum(t.count for t in self.templates)
        if self.budget > n:
            raise ValueError(f"budget {self.budget} exceeds the number of arms {n}")
        if "equitable" in self.allocators and self.equity is None:
            raise ValueError("equitable allocator needs 'equity'")
        return self


# --- survival ---------------------------------------------------------------


class SyntheticCohort(_Strict):
    n: int = Field(ge=1)
    beta: list[float]
    gamma: list[float]
    censoring_rate: float = Field(0.0, ge=0, lt=1)


class SurvivalFitConfig(_Strict):
    data: Optional[Path] = None
    synthetic: Optional[SyntheticCohort] = None
    max_followup: Optional[float] = None
    censored_value: Literal[0, 1] = 1
    period: float = Field(1.0, gt=0)
    l2: float = Field(1e-2, ge=0)
    max_iter: int = Field(100, ge=1)
    tol: float = Field(1e-8, gt=0)
    horizon: Optional[int] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.data is None) == (self.synthetic is None):
            raise ValueError("exactly one of 'data' or 'synthetic' is required")
        return self


# --- experiments ------------------------------------------------------------


class DesignConfig(_Strict):
    unit: Literal["individual", "cluster"] = "individual"
    mechanism: Literal["fixed", "micro"] = "fixed"
    arms: list[str] = ["control", "treatment"]
    probabilities: Optional[list[float]] = None
    treatment_prob: Optional[Union[float, list[float]]] = None


class ExperimentConfig(_Strict):
    design: DesignConfig = Field(default_factory=DesignConfig)
    log: Optional[Path] = None
    n_units: int = Field(100, ge=1)
    n_clusters: int = Field(10, ge=1)
    n_points: int = Field(1, ge=1)
    effect: float = 0.0
    baseline: float = 0.0
    noise_sd: float = Field(1.0, ge=0)
    estimators: list[Literal["difference-in-means", "ipw"]] = ["difference-in-means", "ipw"]


# --- decide / allocate ------------------------------------------------------


class DynamicTraitConfig(_Strict):
    name: str
    kind: str
    aggregator: Literal["count", "sum", "mean", "last"]
    window_days: float = Field(gt=0)
    field: Optional[str] = None


class StaticTraitConfig(_Strict):
    name: str
    kind: str
    field: str


class ColumnConfig(_Strict):
    trait: str
    mean: float = 0.0
    scale: float = Field(1.0, gt=0)
    indicator: bool = True


class DecideConfig(_Strict):
    events: Path
    now: str
    dynamic_traits: list[DynamicTraitConfig] = []
    static_traits: list[StaticTraitConfig] = []
    columns: list[ColumnConfig]
    n_arms: int = Field(ge=1)
    policy: PolicyConfig = Field(default_factory=ThompsonConfig)
    checkpoint: Optional[Path] = None
    feedback: Optional[Path] = None
    propensity_samples: int = Field(1000, ge=1)


class AllocateConfig(_Strict):
    cohort: Path
    budget: int = Field(ge=0)
    discount: float = Field(0.9, gt=0, lt=1)
    equity: Optional[Union[float, dict[str, float]]] = None
    round: int = Field(0, ge=0)


# --- top level --------------------------------------------------------------

_SECTIONS = {
    "bandit-sim": ("bandit", BanditSimConfig),
    "rmab-sim": ("rmab", RmabSimConfig),
    "survival-fit": ("survival", SurvivalFitConfig),
    "experiment": ("experiment", ExperimentConfig),
    "decide": ("decide", DecideConfig),
    "allocate": ("allocate", AllocateConfig),
}


class ScenarioConfig(_Strict):
    kind: Literal["bandit-sim", "rmab-sim", "survival-fit", "experiment", "decide", "allocate"]
    seed: int
    name: str = "scenario"
    replications: int = Field(1, ge=1)
    bandit: Optional[BanditSimConfig] = None
    rmab: Optional[RmabSimConfig] = None
    survival: Optional[SurvivalFitConfig] = None
    experiment: Optional[ExperimentConfig] = None
    decide: Optional[DecideConfig] = None
    allocate: Optional[AllocateConfig] = None

    @model_validator(mode="after")
    def _exactly_one_section(self):
        wanted = _SECTIONS[self.kind][0]
        for section, _ in _SECTIONS.values():
            if section != wanted and getattr(self, section) is not None:
                raise ValueError(f"section '{section}' is not allowed for kind '{self.kind}'")
        if getattr(self, wanted) is None:
            raise ValueError(f"kind '{self.kind}' requires a '{wanted}' section")
        return self

    @property
    def section(self):
        return getattr(self, _SECTIONS[self.kind][0])


def _loc(err: dict) -> str:
    parts = [str(p) for p in err.get("loc", ()) if not isinstance(p, int)]
    # drop discriminator tags that pydantic inserts into the location
    parts = [p for p in parts if p not in {"linucb", "thompson", "ekf", "neural-linear", "random", "oracle"}]
    return ".".join(parts)


def _resolve_paths(cfg: ScenarioConfig, base: Path) -> None:
    section = cfg.section
    for name in ("data", "log", "events", "checkpoint", "feedback", "cohort"):
        value = getattr(section, name, None)
        if value is None:
            continue
        path = value if value.is_absolute() else (base / value)
        if not path.exists():
            raise ConfigError(f"{_SECTIONS[cfg.kind][0]}.{name}: file not found: {value}", f"{_SECTIONS[cfg.kind][0]}.{name}")
        setattr(section, name, path)


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a YAML scenario; relative file references resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return parse_scenario(raw, base=path.parent)


def parse_scenario(raw: Any, base: Path | None = None) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    try:
        cfg = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = _loc(err)
        if err["type"] == "extra_forbidden":
            raise ConfigError(f"unknown key: {key}", key) from None
        if err["type"] == "missing":
            raise ConfigError(f"missing required field: {key}", key) from None
        where = f"{key}: " if key else ""
        raise ConfigError(f"{where}{err['msg']}", key or None) from None
    if base is not None:
        _resolve_paths(cfg, base)
    return cfg


def resolved_yaml(cfg: ScenarioConfig) -> str:
    """The validated config with all defaults filled in."""
    data = cfg.model_dump(mode="json", exclude_none=True)
    return yaml.safe_dump(data, sort_keys=True)
