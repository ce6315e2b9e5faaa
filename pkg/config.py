"""
Experiment config files.

A config is a JSON object whose top-level "kind" selects the experiment.
Each kind is a pydantic model; unknown keys are rejected and every error
carries its dotted location. Models build the dataclasses the simulator
and the immune agent run on.
"""

import json
from dataclasses import asdict
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationInfo, field_validator, model_validator

import protocol
import simkernel
from immune import ABNORMAL_PROFILE, DEFAULT_QUANTILE, NORMAL_PROFILE, SyntheticSpec, TraceProfile
from protocol import PolicyConfig, Variant
from simkernel import ConfigError, SimConfig

# --- Constants for Configuration ---
KINDS = ("sord_sweep", "sord_run", "i3_pipeline")
DEFAULT_LOAD_POINTS = (0.5, 0.6, 0.7, 0.75, 0.82, 0.85, 0.88, 0.95)
TRAIN_PRESET = {"n_normal": 40, "n_abnormal": 0, "seed": 1}
TEST_PRESET = {"n_normal": 60, "n_abnormal": 20, "seed": 2}


class ConfigModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PolicyModel(ConfigModel):
    qttl_init: int = protocol.DEFAULT_QTTL
    attl_init: int = protocol.DEFAULT_ATTL
    cache_max: int = protocol.DEFAULT_CACHE_MAX
    cache_lifetime: int = protocol.DEFAULT_CACHE_LIFETIME
    adv_delta: float = protocol.DEFAULT_ADV_DELTA
    fanout: int = protocol.DEFAULT_FANOUT
    collect_window: int | None = None
    variant: Variant = Variant.QUERY_AND_ADVERT

    @model_validator(mode="after")
    def _resolve(self):
        self.collect_window = self.build().collect_window
        return self

    def build(self) -> PolicyConfig:
        return PolicyConfig(**dict(self))


class SimModel(ConfigModel):
    n: int = simkernel.DEFAULT_NODES
    k_near: int = 4
    n_far: int = 1
    policy: PolicyModel = Field(default_factory=PolicyModel)
    arrival_rate: float | None = None
    job_duration_mean: float = simkernel.DEFAULT_JOB_DURATION
    node_capacity: int = simkernel.DEFAULT_CAPACITY
    target_load: float | None = 0.5
    horizon: int = simkernel.DEFAULT_HORIZON
    warmup: int | None = None
    seed: int = 0
    demand: float | None = None
    prefill: bool = True
    evict_interval: int = simkernel.DEFAULT_EVICT_INTERVAL
    trace: bool = False

    @model_validator(mode="after")
    def _resolve(self):
        self.warmup = self.build().warmup
        return self

    def build(self) -> SimConfig:
        return SimConfig(**{**dict(self), "policy": self.policy.build()})


class SweepModel(ConfigModel):
    load_points: list[float] = Field(default_factory=lambda: list(DEFAULT_LOAD_POINTS), min_length=1)
    variants: list[Variant] = Field(default_factory=lambda: [Variant.QUERY_ONLY, Variant.QUERY_AND_ADVERT],
                                    min_length=1)
    seeds: int = Field(default=5, ge=1)
    workers: int = Field(default=1, ge=1)

    @field_validator("load_points")
    @classmethod
    def _inside_unit_interval(cls, points: list[float]) -> list[float]:
        for load in points:
            if not 0.0 < load < 1.0:
                raise ValueError(f"load point {load} outside (0, 1)")
        return points


class ProfileModel(ConfigModel):
    mean: float = 0.25
    jitter: float = 0.05
    phi: float = 0.8
    spread: float = 0.05
    burst_prob: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self) -> TraceProfile:
        return TraceProfile(**dict(self))


class TraceSetModel(ConfigModel):
    n_normal: int = 50
    n_abnormal: int = 50
    length: int = 256
    seed: int = 0
    normal: ProfileModel = Field(default_factory=lambda: ProfileModel(**asdict(NORMAL_PROFILE)))
    abnormal: ProfileModel = Field(default_factory=lambda: ProfileModel(**asdict(ABNORMAL_PROFILE)))

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self) -> SyntheticSpec:
        return SyntheticSpec(**{**dict(self), "normal": self.normal.build(), "abnormal": self.abnormal.build()})


class SordSweepFile(ConfigModel):
    kind: Literal["sord_sweep"] = "sord_sweep"
    sim: SimModel = Field(default_factory=SimModel)
    sweep: SweepModel = Field(default_factory=SweepModel)


class SordRunFile(ConfigModel):
    kind: Literal["sord_run"] = "sord_run"
    sim: SimModel = Field(default_factory=SimModel)


class I3PipelineFile(ConfigModel):
    """Train on normal traces, immunise a peer, evaluate one curve per prior."""

    kind: Literal["i3_pipeline"] = "i3_pipeline"
    train: TraceSetModel | None = Field(default_factory=lambda: TraceSetModel(**TRAIN_PRESET))
    test: TraceSetModel | None = Field(default_factory=lambda: TraceSetModel(**TEST_PRESET))
    train_manifest: str | None = None
    test_manifest: str | None = None
    threshold_quantile: float = Field(default=DEFAULT_QUANTILE, gt=0.0, le=1.0)
    priors: list[Union[Literal["tuned"], float]] = Field(default_factory=lambda: [0.5, "tuned"], min_length=1)
    grid_points: int = Field(default=50, ge=2)

    @field_validator("train", "test", mode="before")
    @classmethod
    def _over_preset(cls, value, info: ValidationInfo):
        # a partial trace set keeps the rest of its preset
        preset = TRAIN_PRESET if info.field_name == "train" else TEST_PRESET
        return {**preset, **value} if isinstance(value, dict) else value

    @field_validator("priors")
    @classmethod
    def _open_unit_interval(cls, priors):
        for p in priors:
            if p != "tuned" and not 0.0 < p < 1.0:
                raise ValueError(f"prior {p!r} must be \"tuned\" or a number in (0, 1)")
        return priors

    @model_validator(mode="after")
    def _has_sources(self):
        if self.train is None and self.train_manifest is None:
            raise ValueError("i3_pipeline needs train or train_manifest")
        if self.test is None and self.test_manifest is None:
            raise ValueError("i3_pipeline needs test or test_manifest")
        return self


ExperimentFile = Annotated[Union[SordSweepFile, SordRunFile, I3PipelineFile], Field(discriminator="kind")]
EXPERIMENT = TypeAdapter(ExperimentFile)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `dotted.key=value` overrides to the raw config object."""
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        target = data
        for part in parts[:-1]:
            nxt = target.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key}: {part} is not an object")
            target = nxt
        target[parts[-1]] = _parse_value(text)
    return data


def apply_seed(data: dict, seed: int) -> dict:
    if data.get("kind") == "i3_pipeline":
        for offset, part in enumerate(("train", "test")):
            if isinstance(data.get(part), dict) or part not in data:
                data.setdefault(part, {})["seed"] = seed + offset
    else:
        data.setdefault("sim", {})["seed"] = seed
    return data


def parse_config(data):
    """Validate a raw config object. Schema and range errors raise pydantic's ValidationError."""
    return EXPERIMENT.validate_python(data)


def read_config(path, overrides: list[str] = (), seed: int | None = None):
    """Read, override and validate a config file. OSError propagates for I/O failures."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    apply_overrides(data, list(overrides))
    if seed is not None:
        apply_seed(data, seed)
    return parse_config(data)


def effective_config_text(cfg: ConfigModel) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
