"""Population state, founder sampling and simulation configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import special

from ..errors import ConfigurationError, DomainError
from ..rates import AgeRate

__all__ = [
    "PopulationState",
    "AgeDistribution",
    "InitialCondition",
    "ProcessRates",
    "SimConfig",
    "path_rng",
    "block_rng",
    "RNG_ALGORITHM",
]

RNG_ALGORITHM = "PCG64"
_PATH_STREAM = 0
_BLOCK_STREAM = 1


def path_rng(seed: int, path: int) -> np.random.Generator:
    """Independent stream for one path, keyed by ``(seed, path)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(_PATH_STREAM, path))))


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Independent stream for one fixed-size block of paths."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(_BLOCK_STREAM, block))))


@dataclass
class PopulationState:
    """Age chart of one realization, stored as times of birth (TOB).

    In fission mode ``doublets`` holds one TOB per pair of same-age twins.
    Steppers mutate the state in place and return it.
    """

    mode: Literal["budding", "fission"] = "budding"
    singles: np.ndarray = field(default_factory=lambda: np.empty(0))
    doublets: np.ndarray = field(default_factory=lambda: np.empty(0))
    clock: float = 0.0

    def __post_init__(self):
        if self.mode not in ("budding", "fission"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        self.singles = np.asarray(self.singles, dtype=float).copy()
        self.doublets = np.asarray(self.doublets, dtype=float).copy()
        if self.mode == "budding" and self.doublets.size:
            raise ConfigurationError("budding populations have no doublets")
        self.check()

    @property
    def m(self) -> int:
        return int(self.singles.size)

    @property
    def n_doublets(self) -> int:
        return int(self.doublets.size)

    def total(self) -> int:
        return self.m + 2 * self.n_doublets

    def ages(self) -> np.ndarray:
        """Individual ages, each doublet contributing two entries."""
        return np.concatenate([self.clock - self.singles, np.repeat(self.clock - self.doublets, 2)])

    def check(self) -> None:
        if np.any(self.singles > self.clock) or np.any(self.doublets > self.clock):
            raise DomainError("a time of birth lies in the future")

    def copy(self) -> "PopulationState":
        return PopulationState(self.mode, self.singles.copy(), self.doublets.copy(), self.clock)


@dataclass(frozen=True, eq=False)
class AgeDistribution:
    """Founder age law sampled by inverse CDF.

    Kinds: ``point(value)``, ``exponential(rate)``, ``gamma(shape, rate)`` and
    ``tabulated(grid, density)`` (piecewise-linear density, inverted exactly).
    """

    kind: str
    params: tuple[float, ...] = ()
    grid: np.ndarray | None = field(default=None, repr=False)
    density: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "point":
            if len(self.params) != 1 or self.params[0] < 0:
                raise ConfigurationError("point age needs one nonnegative value")
        elif self.kind == "exponential":
            if len(self.params) != 1 or not self.params[0] > 0:
                raise ConfigurationError("exponential age needs a positive rate")
        elif self.kind == "gamma":
            if len(self.params) != 2 or not (self.params[0] > 0 and self.params[1] > 0):
                raise ConfigurationError("gamma age needs positive shape and rate")
        elif self.kind == "tabulated":
            g = np.asarray(self.grid, dtype=float)
            p = np.asarray(self.density, dtype=float)
            if g.ndim != 1 or g.shape != p.shape or g.size < 2 or np.any(np.diff(g) <= 0):
                raise ConfigurationError("tabulated age law needs an increasing grid and matching density")
            if g[0] < 0 or np.any(p < 0) or not np.any(p > 0):
                raise ConfigurationError("tabulated age law needs nonnegative ages and density")
            object.__setattr__(self, "grid", g)
            object.__setattr__(self, "density", p)
        else:
            raise ConfigurationError(f"unknown age distribution {self.kind!r}")

    @classmethod
    def point(cls, value: float = 0.0) -> "AgeDistribution":
        return cls("point", (float(value),))

    @classmethod
    def exponential(cls, rate: float) -> "AgeDistribution":
        return cls("exponential", (float(rate),))

    @classmethod
    def gamma(cls, shape: float, rate: float) -> "AgeDistribution":
        return cls("gamma", (float(shape), float(rate)))

    @classmethod
    def tabulated(cls, grid: Sequence[float], density: Sequence[float]) -> "AgeDistribution":
        return cls("tabulated", (), np.asarray(grid, float), np.asarray(density, float))

    def _table_cdf(self):
        g, p = self.grid, self.density
        seg = 0.5 * (p[1:] + p[:-1]) * np.diff(g)
        cdf = np.concatenate(([0.0], np.cumsum(seg)))
        return cdf / cdf[-1], cdf[-1]

    def ppf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "point":
            return np.full_like(u, self.params[0])
        if self.kind == "exponential":
            return -np.log1p(-u) / self.params[0]
        if self.kind == "gamma":
            return special.gammaincinv(self.params[0], u) / self.params[1]
        g, p = self.grid, self.density
        cdf, total = self._table_cdf()
        k = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, g.size - 2)
        # within a segment the CDF is quadratic in the offset x: p_k x + s x^2 / 2
        width = g[k + 1] - g[k]
        slope = (p[k + 1] - p[k]) / width
        target = (u - cdf[k]) * total
        pk = p[k]
        disc = np.maximum(pk * pk + 2.0 * slope * target, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_quad = 2.0 * target / (pk + np.sqrt(disc))
            x_lin = np.where(pk > 0, target / pk, 0.0)
        x = np.where(np.abs(slope) * width > 1e-14 * np.maximum(pk, 1e-300), x_quad, x_lin)
        return g[k] + np.clip(np.nan_to_num(x), 0.0, width)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.ppf(rng.random(size))

    def pdf(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.kind == "point":
            raise DomainError("a point age law has no density")
        if self.kind == "exponential":
            r = self.params[0]
            return np.where(a >= 0, r * np.exp(-r * a), 0.0)
        if self.kind == "gamma":
            k, r = self.params
            with np.errstate(divide="ignore"):
                logp = k * np.log(r) - special.gammaln(k) + special.xlogy(k - 1.0, a) - r * a
            return np.where(a >= 0, np.exp(logp), 0.0)
        _, total = self._table_cdf()
        return np.interp(a, self.grid, self.density, left=0.0, right=0.0) / total

    def upper_quantile(self, q: float = 1e-9) -> float:
        """Age exceeded with probability ``q``."""
        return float(self.ppf(np.array([1.0 - q]))[0])


@dataclass(frozen=True, eq=False)
class InitialCondition:
    """``count`` founders with independent ages; in fission mode they start as singlets
    unless ``as_doublets`` is set (then ``count`` counts pairs)."""

    count: int = 1
    age: AgeDistribution = field(default_factory=AgeDistribution.point)
    as_doublets: bool = False

    def __post_init__(self):
        if self.count < 0:
            raise ConfigurationError("founder count must be nonnegative")

    def sample(self, rng: np.random.Generator, mode: str) -> PopulationState:
        tob = -self.age.sample(rng, self.count)
        if mode == "fission" and self.as_doublets:
            return PopulationState("fission", np.empty(0), tob, 0.0)
        return PopulationState(mode, tob, np.empty(0), 0.0)


@dataclass(frozen=True, eq=False)
class ProcessRates:
    """Birth (budding) or fission hazard together with the death hazard."""

    birth: AgeRate
    death: AgeRate

    @staticmethod
    def age_independent_value(rate: AgeRate) -> float | None:
        """Base hazard if it does not vary with age (shape-1 Gamma included), else ``None``."""
        if rate.kind == "constant":
            return rate.params[0]
        if rate.kind == "gamma_hazard" and rate.params[0] == 1.0:
            return rate.params[1]
        return None

    @property
    def memoryless_majorant(self) -> bool:
        """True when the majorant never depends on the lookahead window."""
        def ok(r: AgeRate) -> bool:
            return self.age_independent_value(r) is not None and (
                r.capacity is None or not r.capacity.time_dependent
            )

        return ok(self.birth) and ok(self.death)


_STEPPERS = ("thinning", "fixed_dt")


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Everything needed to run an ensemble of independent paths.

    Parameters
    ----------
    rates : ProcessRates
    initial : InitialCondition
    horizon : float
    paths, seed : int
    mode : {"budding", "fission"}
    stepper : {"thinning", "fixed_dt"}
    dt : float
        Step of the fixed-dt scheme.
    majorant_window : float
        Lookahead over which thinning bounds each hazard.
    output_times : sequence of float
        Defaults to ``[horizon]``.
    bin_width, age_max : float
        Histogram resolution and range; ``age_max`` defaults to the horizon plus a
        far quantile of the founder age law.
    windows : sequence of (lo, hi)
        Age windows whose per-path counts are always kept.
    keep_charts : bool
        Keep every path's age chart at each output time (needed for arbitrary windows).
    block_size : int
        Paths per vectorized block in the fixed-dt scheme (fixes the RNG layout).
    """

    rates: ProcessRates
    initial: InitialCondition = field(default_factory=InitialCondition)
    horizon: float = 1.0
    paths: int = 1000
    seed: int = 0
    mode: Literal["budding", "fission"] = "budding"
    stepper: Literal["thinning", "fixed_dt"] = "thinning"
    dt: float = 1e-3
    majorant_window: float = 0.25
    output_times: tuple[float, ...] = ()
    bin_width: float = 0.05
    age_max: float | None = None
    windows: tuple[tuple[float, float], ...] = ()
    keep_charts: bool = True
    block_size: int = 1024

    def __post_init__(self):
        if self.mode not in ("budding", "fission"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.stepper not in _STEPPERS:
            raise ConfigurationError(f"unknown stepper {self.stepper!r}")
        if not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")
        if self.paths < 0:
            raise ConfigurationError("paths must be nonnegative")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.majorant_window > 0:
            raise ConfigurationError("majorant window must be positive")
        if not self.bin_width > 0:
            raise ConfigurationError("bin width must be positive")
        if self.block_size < 1:
            raise ConfigurationError("block size must be positive")
        times = tuple(sorted(float(t) for t in (self.output_times or (self.horizon,))))
        if times[0] < 0 or times[-1] > self.horizon + 1e-12:
            raise ConfigurationError("output times must lie in [0, horizon]")
        if len(set(times)) != len(times):
            raise ConfigurationError("output times must be distinct")
        if self.stepper == "fixed_dt":
            for t in times + (self.horizon,):
                k = t / self.dt
                if abs(k - round(k)) > 1e-7 * max(1.0, k):
                    raise ConfigurationError(f"time {t} is not a multiple of dt={self.dt}")
        object.__setattr__(self, "output_times", times)
        for lo, hi in self.windows:
            if not 0 <= lo <= hi:
                raise ConfigurationError(f"bad window ({lo}, {hi})")
        object.__setattr__(self, "windows", tuple((float(a), float(b)) for a, b in self.windows))
        if self.age_max is None:
            tail = 0.0 if self.initial.count == 0 else self.initial.age.upper_quantile()
            amax = self.horizon + tail
            object.__setattr__(self, "age_max", math.ceil(amax / self.bin_width) * self.bin_width)
        elif not self.age_max > 0:
            raise ConfigurationError("age_max must be positive")
        for r in (self.rates.birth, self.rates.death):
            if self.stepper == "thinning" and not r.bounded_near_zero:
                raise ConfigurationError("thinning needs bounded hazards (gamma shape >= 1)")

    @property
    def bin_edges(self) -> np.ndarray:
        n = int(round(self.age_max / self.bin_width))
        return self.bin_width * np.arange(n + 1)

    def validate_majorant(self, rng: np.random.Generator | None = None, samples: int = 256) -> None:
        """Spot-check that the hazard never exceeds its window supremum."""
        rng = rng or np.random.default_rng(0)
        w = self.majorant_window
        a = rng.random(samples) * (self.age_max or 1.0)
        n = rng.integers(0, 50, samples)
        for r in (self.rates.birth, self.rates.death):
            sup = r.sup(a, a + w, n, 0.0, w)
            probe = a + rng.random(samples) * w
            if np.any(r.eval(probe, n) > sup * (1 + 1e-12) + 1e-300):
                raise ConfigurationError("rate exceeds its majorant on a sampled window")
