"""Run-configuration schema: YAML/JSON mappings validated into model objects.

Unknown keys are rejected everywhere so that typos never pass silently.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .detsolve import GridFunction
from .errors import ConfigurationError
from .mc import AgeDistribution, InitialCondition, ProcessRates, SimConfig
from .rates import AgeRate, CapacityModifier, GammaBranching
from .spatial import PositionProfile, SpatialConfig

__all__ = [
    "load_mapping",
    "parse_config",
    "describe_validation_error",
    "SimulateSpec",
    "MvfSpec",
    "MomentsSpec",
    "FissionSpec",
    "SpatialSpec",
    "SCHEMAS",
]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CapacitySpec(_Strict):
    capacity: float
    scale: float = 1.0
    schedule: list[tuple[float, float]] = []

    def build(self) -> CapacityModifier:
        return CapacityModifier(self.capacity, self.scale, tuple(tuple(p) for p in self.schedule))


class _RateBase(_Strict):
    capacity: Optional[CapacitySpec] = None

    def _cap(self):
        return None if self.capacity is None else self.capacity.build()


class ConstantRateSpec(_RateBase):
    kind: Literal["constant"]
    value: float

    def build(self) -> AgeRate:
        return AgeRate.constant(self.value, self._cap())


class LinearRateSpec(_RateBase):
    kind: Literal["linear"]
    slope: float
    intercept: float = 0.0

    def build(self) -> AgeRate:
        return AgeRate.linear(self.slope, self.intercept, self._cap())


class GammaRateSpec(_RateBase):
    kind: Literal["gamma_hazard"]
    alpha: float
    weight: float = 1.0

    def build(self) -> AgeRate:
        return AgeRate.gamma_hazard_rate(self.alpha, self.weight, self._cap())


class TabulatedRateSpec(_RateBase):
    kind: Literal["tabulated"]
    grid: list[float]
    values: list[float]

    def build(self) -> AgeRate:
        return AgeRate.tabulated(self.grid, self.values, self._cap())


class CsvRateSpec(_RateBase):
    kind: Literal["csv"]
    path: str

    def build(self) -> AgeRate:
        return AgeRate.from_csv(self.path, self._cap())


RateSpec = Annotated[
    Union[ConstantRateSpec, LinearRateSpec, GammaRateSpec, TabulatedRateSpec, CsvRateSpec],
    Field(discriminator="kind"),
]


class AgeSpec(_Strict):
    """Founder age law: point (value), exponential (rate), gamma (shape, rate) or tabulated."""

    kind: Literal["point", "exponential", "gamma", "tabulated"] = "point"
    value: float = 0.0
    rate: Optional[float] = None
    shape: Optional[float] = None
    grid: Optional[list[float]] = None
    density: Optional[list[float]] = None

    def build(self) -> AgeDistribution:
        try:
            if self.kind == "point":
                return AgeDistribution.point(self.value)
            if self.kind == "exponential":
                return AgeDistribution.exponential(self.rate)
            if self.kind == "gamma":
                return AgeDistribution.gamma(self.shape, self.rate)
            return AgeDistribution.tabulated(self.grid, self.density)
        except TypeError as exc:
            raise ConfigurationError(f"age law {self.kind!r} is missing a parameter") from exc

    def grid_density(self, a_max: float, dt: float, scale: float = 1.0) -> GridFunction:
        if self.kind == "point":
            raise ConfigurationError("deterministic solvers need an age density, not a point age")
        law = self.build()
        return GridFunction.from_function(lambda a: scale * law.pdf(a), 0.0, a_max, dt)


class InitialSpec(_Strict):
    count: int = 1
    age: AgeSpec = AgeSpec()
    as_doublets: bool = False

    def build(self) -> InitialCondition:
        return InitialCondition(self.count, self.age.build(), self.as_doublets)


def _finite_or_inf(v: float) -> float:
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


class SimulateSpec(_Strict):
    mode: Literal["budding", "fission"] = "budding"
    birth: RateSpec
    death: RateSpec = ConstantRateSpec(kind="constant", value=0.0)
    initial: InitialSpec = InitialSpec()
    horizon: float
    paths: int = 1000
    seed: int = 0
    stepper: Literal["thinning", "fixed_dt"] = "thinning"
    dt: float = 1e-3
    majorant_window: float = 0.25
    output_times: list[float] = []
    bin_width: float = 0.05
    age_max: Optional[float] = None
    windows: list[tuple[float, float]] = []
    block_size: int = 1024

    @field_validator("windows")
    @classmethod
    def _no_nan_windows(cls, v):
        return [(_finite_or_inf(a), _finite_or_inf(b)) for a, b in v]

    def build(self, seed: int | None = None) -> SimConfig:
        return SimConfig(
            ProcessRates(self.birth.build(), self.death.build()),
            self.initial.build(),
            horizon=self.horizon,
            paths=self.paths,
            seed=self.seed if seed is None else seed,
            mode=self.mode,
            stepper=self.stepper,
            dt=self.dt,
            majorant_window=self.majorant_window,
            output_times=tuple(self.output_times),
            bin_width=self.bin_width,
            age_max=self.age_max,
            windows=tuple(tuple(w) for w in self.windows),
            keep_charts=False,
            block_size=self.block_size,
        )


class MvfSpec(_Strict):
    birth: RateSpec
    death: RateSpec = ConstantRateSpec(kind="constant", value=0.0)
    initial_density: AgeSpec
    initial_count: float = 1.0
    horizon: float
    dt: float = 1e-3
    age_max: Optional[float] = None
    output_times: list[float] = []

    def density(self) -> GridFunction:
        a_max = self.age_max
        if a_max is None:
            law = self.initial_density.build()
            a_max = math.ceil(law.upper_quantile(1e-14) / self.dt) * self.dt
        return self.initial_density.grid_density(a_max, self.dt, self.initial_count)


class MomentsSpec(MvfSpec):
    order: Literal[1, 2] = 2
    method: Literal["auto", "constant", "general"] = "auto"
    windows: list[tuple[float, float]] = [(0.0, math.inf)]
    field_stride: int = Field(20, ge=1)


class BranchingSpec(_Strict):
    alpha: float
    a2: float = 1.0

    def build(self) -> GammaBranching:
        return GammaBranching.with_fission_probability(self.alpha, self.a2)


class FissionSpec(_Strict):
    branching: Optional[BranchingSpec] = None
    fission: Optional[RateSpec] = None
    death: Optional[RateSpec] = None
    horizon: float
    dt: float = 1e-3
    singlets: Optional[AgeSpec] = None
    singlet_count: float = 1.0
    output_stride: int = Field(10, ge=1)
    field_stride: int = Field(50, ge=1)

    def rates(self) -> tuple[AgeRate, AgeRate]:
        if self.branching is not None:
            if self.fission is not None or self.death is not None:
                raise ConfigurationError("give either 'branching' or 'fission'/'death', not both")
            b = self.branching.build()
            return b.fission_rate(), b.death_rate()
        if self.fission is None:
            raise ConfigurationError("a fission rate ('branching' or 'fission') is required")
        death = self.death.build() if self.death is not None else AgeRate.constant(0.0)
        return self.fission.build(), death


class ProfileSpec(_Strict):
    kind: Literal["uniform", "gaussian", "tabulated"] = "uniform"
    center: float = 0.0
    width: float = 1.0
    amplitude: float = 1.0
    baseline: float = 0.0
    grid: Optional[list[float]] = None
    values: Optional[list[float]] = None

    def build(self) -> PositionProfile:
        if self.kind == "uniform":
            return PositionProfile.uniform()
        if self.kind == "gaussian":
            return PositionProfile.gaussian(self.center, self.width, self.amplitude, self.baseline)
        return PositionProfile.tabulated(self.grid, self.values)


class SpatialSpec(SimulateSpec):
    stepper: Literal["fixed_dt"] = "fixed_dt"
    mode: Literal["budding"] = "budding"
    dt: float = 1e-2
    diffusion: float = 0.0
    birth_profile: ProfileSpec = ProfileSpec()
    death_profile: ProfileSpec = ProfileSpec()
    q0: float = 0.0
    q0_spread: float = 0.0
    q_bin_width: float = 0.1
    q_range: Optional[tuple[float, float]] = None
    dimension: Literal[1] = 1

    def build_spatial(self, seed: int | None = None) -> SpatialConfig:
        return SpatialConfig(
            self.build(seed),
            diffusion=self.diffusion,
            birth_profile=self.birth_profile.build(),
            death_profile=self.death_profile.build(),
            q0=self.q0,
            q0_spread=self.q0_spread,
            q_bin_width=self.q_bin_width,
            q_range=self.q_range,
            dimension=self.dimension,
        )


SCHEMAS: dict[str, type[_Strict]] = {
    "simulate": SimulateSpec,
    "solve-mvf": MvfSpec,
    "moments": MomentsSpec,
    "fission": FissionSpec,
    "spatial": SpatialSpec,
}


def load_mapping(path: str | Path) -> dict:
    """Read a YAML (or JSON) mapping; a run manifest yields its echoed config."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a mapping")
    if data.get("agekin_manifest"):
        data = data["config"]
    return data


def describe_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            lines.append(f"unknown key '{loc}'")
        else:
            lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(command: str, data: dict):
    """Validate a mapping against the schema of ``command``."""
    schema = SCHEMAS[command]
    try:
        return schema.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(describe_validation_error(exc)) from exc
