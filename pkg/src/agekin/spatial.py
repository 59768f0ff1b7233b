"""Age-structured Monte Carlo with 1-D diffusion and position-dependent hazards.

Every individual diffuses independently; newborns start at the parent's
position. Hazards are an age rate times a position profile.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DomainError
from .mc.engine import Snapshot, SpatialTerms
from .mc.estimator import EnsembleEstimator
from .mc.simulate import chunk_ranges, resolve_workers, run_block
from .mc.state import SimConfig
from .rates import AgeRate, propagator

__all__ = [
    "PositionProfile",
    "SpatialConfig",
    "SpatialPopulationState",
    "SpatialResult",
    "simulate_spatial",
    "heat_kernel_check",
    "HeatKernelComparison",
    "compare_heat_kernel",
]


@dataclass(frozen=True, eq=False)
class PositionProfile:
    """Multiplier of an age hazard as a function of position.

    ``uniform()`` is 1 everywhere, ``tabulated(grid, values)`` interpolates
    linearly with flat extrapolation, and ``gaussian(center, width, amplitude,
    baseline)`` is ``baseline + amplitude * exp(-(q-center)**2 / (2 width**2))``.
    """

    kind: str = "uniform"
    params: tuple[float, ...] = ()
    grid: np.ndarray | None = field(default=None, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "uniform":
            return
        if self.kind == "gaussian":
            center, width, amp, base = self.params
            if not width > 0 or amp < 0 or base < 0:
                raise ConfigurationError("gaussian profile needs width > 0 and nonnegative levels")
            return
        if self.kind == "tabulated":
            g = np.asarray(self.grid, float)
            v = np.asarray(self.values, float)
            if g.ndim != 1 or g.shape != v.shape or g.size < 2 or np.any(np.diff(g) <= 0):
                raise ConfigurationError("tabulated profile needs an increasing grid and matching values")
            if np.any(v < 0):
                raise ConfigurationError("profile values must be nonnegative")
            object.__setattr__(self, "grid", g)
            object.__setattr__(self, "values", v)
            return
        raise ConfigurationError(f"unknown position profile {self.kind!r}")

    @classmethod
    def uniform(cls) -> "PositionProfile":
        return cls("uniform")

    @classmethod
    def gaussian(cls, center: float, width: float, amplitude: float, baseline: float = 0.0) -> "PositionProfile":
        return cls("gaussian", (float(center), float(width), float(amplitude), float(baseline)))

    @classmethod
    def tabulated(cls, grid, values) -> "PositionProfile":
        return cls("tabulated", (), np.asarray(grid, float), np.asarray(values, float))

    @property
    def is_uniform(self) -> bool:
        return self.kind == "uniform"

    def __call__(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.kind == "uniform":
            return np.ones_like(q)
        if self.kind == "gaussian":
            c, w, amp, base = self.params
            return base + amp * np.exp(-0.5 * ((q - c) / w) ** 2)
        return np.interp(q, self.grid, self.values)


@dataclass
class SpatialPopulationState:
    """Times of birth with aligned positions; reorderings move both together."""

    tob: np.ndarray
    positions: np.ndarray
    clock: float = 0.0

    def __post_init__(self):
        self.tob = np.asarray(self.tob, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.tob.shape != self.positions.shape:
            raise DomainError("every individual needs exactly one position")
        if np.any(self.tob > self.clock):
            raise DomainError("a time of birth lies in the future")

    def ages(self) -> np.ndarray:
        return self.clock - self.tob

    def permute(self, order) -> "SpatialPopulationState":
        order = np.asarray(order)
        return SpatialPopulationState(self.tob[order], self.positions[order], self.clock)


@dataclass(frozen=True, eq=False)
class SpatialConfig:
    """A budding simulation plus diffusion, profiles and the position grid.

    ``base`` supplies rates, founders, horizon, paths, seed, dt, output times and
    age bins; it must use the fixed-dt stepper. Founders start at ``q0`` plus a
    Gaussian spread of standard deviation ``q0_spread``.
    """

    base: SimConfig
    diffusion: float = 0.0
    birth_profile: PositionProfile = field(default_factory=PositionProfile.uniform)
    death_profile: PositionProfile = field(default_factory=PositionProfile.uniform)
    q0: float = 0.0
    q0_spread: float = 0.0
    q_bin_width: float = 0.1
    q_range: tuple[float, float] | None = None
    dimension: int = 1

    def __post_init__(self):
        if self.dimension != 1:
            raise ConfigurationError("only one spatial dimension is supported")
        if self.diffusion < 0:
            raise ConfigurationError("diffusion constant must be nonnegative")
        if self.base.stepper != "fixed_dt":
            raise ConfigurationError("spatial runs use the fixed_dt stepper")
        if self.base.mode != "budding":
            raise ConfigurationError("spatial runs support budding only")
        if self.q0_spread < 0 or not self.q_bin_width > 0:
            raise ConfigurationError("position spread must be >= 0 and bin width > 0")
        if self.q_range is None:
            half = 6.0 * (math.sqrt(2.0 * self.diffusion * self.base.horizon) + self.q0_spread) + self.q_bin_width
            nb = math.ceil(half / self.q_bin_width)
            object.__setattr__(
                self, "q_range", (self.q0 - nb * self.q_bin_width, self.q0 + nb * self.q_bin_width)
            )
        lo, hi = self.q_range
        if not hi > lo:
            raise ConfigurationError("q_range must be increasing")

    @property
    def q_edges(self) -> np.ndarray:
        lo, hi = self.q_range
        n = max(1, int(round((hi - lo) / self.q_bin_width)))
        return np.linspace(lo, hi, n + 1)

    @property
    def terms(self) -> SpatialTerms:
        return SpatialTerms(
            self.diffusion,
            None if self.birth_profile.is_uniform else self.birth_profile,
            None if self.death_profile.is_uniform else self.death_profile,
        )


@dataclass
class SpatialResult:
    """Age-only ensemble statistics plus the joint (age, position) density."""

    ensemble: EnsembleEstimator
    q_edges: np.ndarray
    aq_sums: list[np.ndarray]
    positions: list[list[np.ndarray]]
    overflow: list[float]

    @property
    def paths(self) -> int:
        return self.ensemble.paths

    def aq_density(self, t: float) -> np.ndarray:
        """Density over (age bin, position bin), individuals weighted by ``1/n``."""
        i = self.ensemble.time_index(t)
        if self.paths == 0:
            return np.zeros_like(self.aq_sums[i])
        da = self.ensemble.bin_width
        dq = float(self.q_edges[1] - self.q_edges[0])
        return self.aq_sums[i] / (self.paths * da * dq)

    def total_probability(self, t: float) -> float:
        """Binned mass + mass outside the grid + probability of extinction; equals 1."""
        i = self.ensemble.time_index(t)
        if self.paths == 0:
            return 0.0
        da = self.ensemble.bin_width
        dq = float(self.q_edges[1] - self.q_edges[0])
        p0 = self.ensemble.n_marginal(t).get(0, 0.0)
        return float(self.aq_density(t).sum() * da * dq + self.overflow[i] / self.paths + p0)

    def all_positions(self, t: float) -> np.ndarray:
        i = self.ensemble.time_index(t)
        parts = self.positions[i]
        return np.concatenate(parts) if parts else np.empty(0)

    def merge(self, other: "SpatialResult") -> "SpatialResult":
        self.ensemble.merge(other.ensemble)
        for i in range(len(self.aq_sums)):
            self.aq_sums[i] = self.aq_sums[i] + other.aq_sums[i]
            self.positions[i].extend(other.positions[i])
            self.overflow[i] += other.overflow[i]
        return self


def _empty_result(config: SpatialConfig) -> SpatialResult:
    est = EnsembleEstimator.for_config(config.base)
    shape = (est.n_bins, config.q_edges.size - 1)
    k = len(est.times)
    return SpatialResult(est, config.q_edges, [np.zeros(shape) for _ in range(k)], [[] for _ in range(k)], [0.0] * k)


def _add(result: SpatialResult, snaps: list[Snapshot]) -> None:
    result.ensemble.add_path(snaps)
    edges_a = result.ensemble.bin_edges
    edges_q = result.q_edges
    for i, snap in enumerate(snaps):
        n = snap.total
        result.positions[i].append(snap.positions)
        if n == 0:
            continue
        h, _, _ = np.histogram2d(snap.ages, snap.positions, bins=(edges_a, edges_q))
        inside = h.sum()
        result.aq_sums[i] += h / n
        result.overflow[i] += (n - inside) / n


def _run_chunk(args) -> SpatialResult:
    config, index, lo, hi = args
    res = _empty_result(config)
    q0, spread = config.q0, config.q0_spread

    def founders(rng, size):
        return q0 + spread * rng.standard_normal(size) if spread > 0 else np.full(size, q0)

    for snaps in run_block(config.base, index, lo, hi, config.terms, founders):
        for s in snaps:
            # newborns copy the parent's position, so ages and positions stay aligned
            if s.positions is None or s.positions.shape != s.ages.shape:
                raise AssertionError("positions misaligned with ages")
        _add(res, snaps)
    return res


def simulate_spatial(config: SpatialConfig, workers: int | None = None) -> SpatialResult:
    """Run the spatial ensemble; bit-identical for any worker count."""
    result = _empty_result(config)
    chunks = chunk_ranges(config.base.paths, config.base.block_size)
    tasks = [(config, i, lo, hi) for i, (lo, hi) in enumerate(chunks)]
    n_workers = min(resolve_workers(workers), max(len(tasks), 1))
    if n_workers <= 1:
        for t in tasks:
            result.merge(_run_chunk(t))
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for part in pool.map(_run_chunk, tasks):
                result.merge(part)
    return result


def heat_kernel_check(mu: AgeRate, t: float, diffusion: float, q, q0: float = 0.0, a0: float = 0.0):
    """Density of a lone founder (age ``a0``, position ``q0``, no births) at time ``t``.

    Survival ``U(a0, a0 + t)`` times the Gaussian ``N(q; q0, 2 D t)``.
    """
    if mu.population_dependent:
        raise ConfigurationError("the single-individual kernel needs a population-independent death rate")
    if t < 0 or diffusion < 0:
        raise DomainError("t and D must be nonnegative")
    q = np.asarray(q, dtype=float)
    surv = float(propagator(mu, a0, a0 + t))
    var = 2.0 * diffusion * t
    if var == 0.0:
        raise DomainError("the kernel is a point mass when D t = 0")
    return surv * np.exp(-0.5 * (q - q0) ** 2 / var) / math.sqrt(2.0 * math.pi * var)


@dataclass(frozen=True)
class HeatKernelComparison:
    """Kolmogorov-Smirnov test of survivor positions and the survival fraction."""

    ks_statistic: float
    ks_pvalue: float
    survival_mc: float
    survival_exact: float
    survival_se: float


def compare_heat_kernel(result: SpatialResult, mu: AgeRate, t: float, diffusion: float,
                        q0: float = 0.0, a0: float = 0.0) -> HeatKernelComparison:
    """Compare a single-founder, birth-free run with :func:`heat_kernel_check`."""
    pos = result.all_positions(t)
    surv = float(propagator(mu, a0, a0 + t))
    p = result.paths
    frac = pos.size / p if p else math.nan
    sd = math.sqrt(2.0 * diffusion * t)
    if sd == 0.0:
        raise DomainError("the kernel is a point mass when D t = 0")
    se = math.sqrt(max(surv * (1 - surv), 0.0) / p) if p else math.nan
    if pos.size == 0:
        return HeatKernelComparison(math.nan, math.nan, frac, surv, se)
    ks = stats.kstest(pos, "norm", args=(q0, sd))
    return HeatKernelComparison(float(ks.statistic), float(ks.pvalue), frac, surv, se)
