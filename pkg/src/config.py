"""
Run configuration: TOML (or JSON) files validated by pydantic and resolved
into the frozen domain types.
"""
import difflib
import hashlib
import json
import re
import sys
import typing
from pathlib import Path
from typing import Any, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import (
    BLOCK,
    PHASE_BLOCK,
    BetaFieldSpec,
    Cycle,
    MeasureSpec,
    ModelSpec,
    RegimeSchedule,
    WeightSchedule,
)
from .errors import ConfigError, DcrmError
from .observables import DEFAULT_BUMP_WIDTH, BaseFunction, DiagonalObservable
from .wep import HSpec

Vector = Union[float, List[float]]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _tile(values: Optional[Vector], n_factors: int) -> Optional[np.ndarray]:
    """Per-factor blocks of 8 are repeated over the factors; full-length vectors pass through."""
    if values is None:
        return None
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full(BLOCK * n_factors, float(arr))
    if arr.size == BLOCK:
        return np.tile(arr, n_factors)
    return arr


class WeightConfig(_Section):
    kind: Literal["constant", "ramp", "cosine"] = "constant"
    value: float = 1.0
    slope: float = 0.0
    amplitude: float = 0.0
    omega: float = 0.0
    phase: float = 0.0

    def to_spec(self) -> WeightSchedule:
        return WeightSchedule(**self.model_dump())


class ComponentConfig(_Section):
    weight: WeightConfig = Field(default_factory=WeightConfig)
    field: "BetaConfig"


class BetaConfig(_Section):
    variant: Literal["constant", "rotational", "contraction", "sigma_contraction", "blended"] = "constant"
    mode: Literal["raw", "squashed"] = "squashed"
    c: Optional[Vector] = None
    generator: Optional[List[List[float]]] = None
    anchor: Optional[Vector] = None
    rate: float = 0.0
    tube_radius: float = 0.0
    components: List[ComponentConfig] = Field(default_factory=list)

    def to_spec(self, n_factors: int, sphere_radius: float) -> BetaFieldSpec:
        c = self.c
        if self.variant == "constant" and c is None:
            c = 0.0
        return BetaFieldSpec(
            variant=self.variant,
            mode=self.mode,
            c=_tile(c, n_factors),
            generator=self.generator,
            anchor=_tile(self.anchor, n_factors),
            rate=self.rate,
            tube_radius=self.tube_radius,
            sphere_radius=sphere_radius,
            components=tuple(
                (comp.weight.to_spec(), comp.field.to_spec(n_factors, sphere_radius))
                for comp in self.components
            ),
        )


ComponentConfig.model_rebuild()


class CycleConfig(_Section):
    ergodic: float = Field(0.0, ge=0)
    concentration: float = Field(0.0, ge=0)
    expansion: float = Field(0.0, ge=0)


class ScheduleConfig(_Section):
    cycles: List[CycleConfig] = Field(default_factory=list)
    concentration_rate: float = Field(1.0, ge=0)
    expansion_rate: float = Field(1.0, ge=0)
    shear_strength: float = 0.5
    rotation_rate: float = 1.0
    target: Literal["anchor", "sigma"] = "anchor"
    anchor: Optional[Vector] = None

    def to_spec(self, n_factors: int) -> RegimeSchedule:
        return RegimeSchedule(
            cycles=tuple(Cycle(**c.model_dump()) for c in self.cycles),
            concentration_rate=self.concentration_rate,
            expansion_rate=self.expansion_rate,
            shear_strength=self.shear_strength,
            rotation_rate=self.rotation_rate,
            target=self.target,
            anchor=_tile(self.anchor, n_factors),
        )


class MeasureConfig(_Section):
    mean: Vector = 0.0
    sigma: Vector = 1.0

    @field_validator("mean", "sigma")
    @classmethod
    def _phase_length(cls, value):
        if isinstance(value, list) and len(value) != PHASE_BLOCK:
            raise ValueError(f"expected a scalar or 16 entries, got {len(value)}")
        return value

    def to_spec(self) -> MeasureSpec:
        return MeasureSpec(mean=self.mean, sigma=self.sigma)


class ObservableConfig(_Section):
    base: Literal["coordinate", "sigma_distance", "bump", "affine"] = "coordinate"
    index: int = 0
    aggregator: Literal["mean", "sum_over_sqrtN", "single_factor"] = "mean"
    factor: int = 0
    width: float = Field(DEFAULT_BUMP_WIDTH, gt=0)
    center: Optional[List[float]] = None
    weights: Optional[List[float]] = None
    offset: float = 0.0

    def to_observable(self, sphere_radius: float) -> DiagonalObservable:
        if self.base == "coordinate":
            base = BaseFunction.coordinate(self.index)
        elif self.base == "sigma_distance":
            base = BaseFunction.sigma_distance(sphere_radius)
        elif self.base == "bump":
            base = BaseFunction.bump(self.center, self.width)
        else:
            base = BaseFunction.affine(self.weights, self.offset)
        return DiagonalObservable(base=base, aggregator=self.aggregator, factor=self.factor)


class LipschitzConfig(_Section):
    map: Literal["cycle", "ergodic", "concentration", "expansion"] = "cycle"
    duration: float = Field(1.0, gt=0)
    pairs: int = Field(10_000, ge=1)
    refine_steps: int = Field(200, ge=0)
    tube_radius: Optional[float] = Field(None, gt=0)


class HConfig(_Section):
    kind: Literal["constant", "sinusoidal", "piecewise"] = "constant"
    value: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    amplitude: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    omega: float = 1.0
    phase: float = 0.0
    breakpoints: List[float] = Field(default_factory=list)
    values: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _piecewise_values(self):
        if self.kind == "piecewise" and self.values is None:
            raise ValueError("piecewise h needs values, one row of 4 per interval")
        return self

    def to_spec(self) -> HSpec:
        return HSpec(**self.model_dump())


class WepConfig(_Section):
    n_a: Optional[int] = Field(None, ge=1)
    n_b: Optional[int] = Field(None, ge=1)
    tau_end: float = Field(1.0, gt=0)
    tau_points: int = Field(11, ge=1)
    h: HConfig = Field(default_factory=HConfig)

    def split(self, n_factors: int) -> Tuple[int, int]:
        n_a = self.n_a if self.n_a is not None else max(1, n_factors // 2)
        n_b = self.n_b if self.n_b is not None else n_factors - n_a
        return n_a, n_b

    def tau_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.tau_end, self.tau_points)


class ExperimentConfig(_Section):
    count: int = Field(10_000, ge=1)
    dt: float = Field(0.01, gt=0)
    dtau: float = Field(0.01, gt=0)
    tau_end: float = Field(1.0, gt=0)
    center: Literal["mean", "median"] = "mean"
    rho_points: int = Field(40, ge=3)
    bound_coefficient: float = Field(32.0, gt=0)
    threads: Optional[int] = Field(None, ge=1)
    observable: ObservableConfig = Field(default_factory=ObservableConfig)
    lipschitz: LipschitzConfig = Field(default_factory=LipschitzConfig)
    wep: WepConfig = Field(default_factory=WepConfig)


class RunConfig(_Section):
    n_factors: int = Field(..., ge=1)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    t_horizon: Optional[float] = Field(None, gt=0)
    length_scale: float = Field(1.0, gt=0)
    sphere_radius: float = Field(1.0, gt=0)
    eta_weights: List[float] = Field(default_factory=lambda: [1.0] * 16)
    beta: BetaConfig = Field(default_factory=BetaConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    measure: MeasureConfig = Field(default_factory=MeasureConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)

    @field_validator("eta_weights")
    @classmethod
    def _eta_length(cls, value):
        if len(value) != PHASE_BLOCK:
            raise ValueError(f"expected 16 entries, got {len(value)}")
        return value

    def resolved_horizon(self) -> float:
        if self.t_horizon is not None:
            return self.t_horizon
        total = sum(c.ergodic + c.concentration + c.expansion for c in self.schedule.cycles)
        return total if total > 0 else 1.0

    def to_spec(self) -> ModelSpec:
        try:
            return ModelSpec(
                n_factors=self.n_factors,
                beta_spec=self.beta.to_spec(self.n_factors, self.sphere_radius),
                schedule=self.schedule.to_spec(self.n_factors),
                measure=self.measure.to_spec(),
                eta_weights=self.eta_weights,
                seed=self.seed,
                t_horizon=self.resolved_horizon(),
                length_scale=self.length_scale,
                sphere_radius=self.sphere_radius,
            )
        except DcrmError as e:
            raise ConfigError(f"invalid configuration: {e}") from e

    def observable(self) -> DiagonalObservable:
        try:
            return self.experiment.observable.to_observable(self.sphere_radius)
        except DcrmError as e:
            raise ConfigError(f"invalid observable: {e}", key="experiment.observable") from e

    def certification_tube(self) -> float:
        """Excluded radius around x_k = 0 for certifying sigma-target maps; 0 means none."""
        if self.schedule.target != "sigma":
            return 0.0
        radius = self.experiment.lipschitz.tube_radius
        return radius if radius is not None else self.beta.tube_radius

    def wep_setup(self) -> Tuple[int, int, HSpec]:
        """Subsystem sizes and drift for the wep command."""
        wep = self.experiment.wep
        n_a, n_b = wep.split(self.n_factors)
        if n_b < 1 or n_a + n_b != self.n_factors:
            raise ConfigError(
                f"n_a + n_b must equal n_factors = {self.n_factors} with both at least 1, got {n_a} + {n_b}",
                key="experiment.wep.n_b" if wep.n_b is not None else "experiment.wep.n_a",
            )
        try:
            h = wep.h.to_spec()
        except DcrmError as e:
            raise ConfigError(f"invalid h: {e}", key="experiment.wep.h") from e
        return n_a, n_b, h

    def canonical_json(self) -> str:
        # thread count never changes results
        data = self.model_dump(mode="json", exclude={"experiment": {"threads"}})
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def run_id(self) -> str:
        """SHA-256 of the canonical JSON of the resolved configuration."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


# --- Loading -------------------------------------------------------------

def _section_model(model: type, loc: Tuple[Any, ...]) -> Optional[type]:
    """The pydantic model that owns the last key of `loc`."""
    current = model
    for part in loc[:-1]:
        if isinstance(part, int):
            continue
        info = current.model_fields.get(part)
        if info is None:
            return None
        nested = _find_model(info.annotation)
        if nested is None:
            return None
        current = nested
    return current


def _find_model(annotation) -> Optional[type]:
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    for arg in typing.get_args(annotation):
        found = _find_model(arg)
        if found is not None:
            return found
    return None


def _find_line(text: str, key: str) -> Optional[int]:
    pattern = re.compile(rf'^\s*"?{re.escape(key)}"?\s*[=:]|^\s*\[+\s*(?:[\w.]+\.)?{re.escape(key)}\s*\]+')
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return number
    return None


def _config_error(error: ValidationError, text: str) -> ConfigError:
    first = error.errors()[0]
    loc = tuple(first["loc"])
    key_parts = [str(p) for p in loc if not isinstance(p, int)]
    key = ".".join(key_parts) if key_parts else None
    last = key_parts[-1] if key_parts else None
    line = _find_line(text, last) if last else None
    suggestion = None
    if first["type"] == "extra_forbidden" and last:
        owner = _section_model(RunConfig, loc)
        if owner is not None:
            matches = difflib.get_close_matches(last, list(owner.model_fields), n=1, cutoff=0.6)
            suggestion = matches[0] if matches else None
        return ConfigError("unknown key", key=key, line=line, suggestion=suggestion)
    return ConfigError(first["msg"], key=key, line=line)


def load_config(path) -> RunConfig:
    """Reads and validates a configuration file without building the model."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON parse error: {e.msg}", line=e.lineno) from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"TOML parse error: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table of keys")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise _config_error(e, text) from e


def parse_config(path) -> Tuple[ModelSpec, ExperimentConfig]:
    config = load_config(path)
    return config.to_spec(), config.experiment


def apply_overrides(config: RunConfig, seed: Optional[int] = None, threads: Optional[int] = None) -> RunConfig:
    """CLI flags win over file values."""
    data = config.model_dump()
    if seed is not None:
        data["seed"] = seed
    if threads is not None:
        data["experiment"]["threads"] = threads
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise _config_error(e, "") from e
