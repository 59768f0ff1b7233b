"""Age- and population-dependent hazards, the Gamma branching law and propagators.

Every rate kind carries an exact cumulative hazard, so survival factors
``U(a1, a2) = exp(-(C(a2) - C(a1)))`` never need numerical quadrature.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .errors import ConfigurationError, DomainError, NumericalWarning

__all__ = [
    "CapacityModifier",
    "AgeRate",
    "GammaBranching",
    "eval_rate",
    "gamma_pdf_cdf_hazard",
    "propagator",
    "log_gamma_sf",
    "gamma_hazard",
]

_HAZARD_CEILING = 1e300
_CF_TINY = 1e-300
_CF_EPS = 1e-15
_CF_MAXIT = 2000


# gammaincc keeps full relative accuracy until it nears underflow
_Q_FLOOR = 1e-250


def _check_ages(a: np.ndarray) -> None:
    if np.any(a < 0):
        raise DomainError("age must be nonnegative")
    if np.any(np.isnan(a)):
        raise DomainError("age must not be NaN")


def _upper_gamma_cf(shape: float, x: np.ndarray) -> np.ndarray:
    """Continued fraction ``h`` with ``Gamma(shape, x) = exp(-x) x**shape h``.

    Modified Lentz evaluation, valid (and rapidly convergent) for ``x > shape + 1``.
    """
    b = x + 1.0 - shape
    c = np.full_like(x, 1.0 / _CF_TINY)
    d = 1.0 / b
    h = d.copy()
    for i in range(1, _CF_MAXIT + 1):
        an = -i * (i - shape)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        delta = d * c
        h = h * delta
        if np.all(np.abs(delta - 1.0) < _CF_EPS):
            break
    return h


def log_gamma_sf(shape: float, x) -> np.ndarray:
    """Log of the regularized upper incomplete gamma function ``Q(shape, x)``.

    Uses ``gammaincc`` until it approaches underflow and a continued fraction beyond,
    so the result stays accurate when ``Q`` underflows.
    """
    x = np.asarray(x, dtype=float)
    q = special.gammaincc(shape, x)
    out = np.empty_like(x)
    small = (x < shape + 1.0) | (q > _Q_FLOOR)
    out[small] = np.log(q[small])
    large = ~small
    if np.any(large):
        xl = x[large]
        h = _upper_gamma_cf(shape, xl)
        out[large] = -xl + shape * np.log(xl) - special.gammaln(shape) + np.log(h)
    return out


def _saturate(h: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(h) | (h > _HAZARD_CEILING)
    if np.any(bad):
        warnings.warn(
            "hazard overflow; saturating at %.1e" % _HAZARD_CEILING, NumericalWarning, stacklevel=3
        )
        h = np.where(bad, _HAZARD_CEILING, h)
    return h


def gamma_hazard(shape: float, t) -> np.ndarray:
    """Hazard ``g/(1-G)`` of the unit-mean Gamma law with shape ``shape``.

    ``t == 0`` gives 0 for shape > 1, 1 for shape == 1 and +inf for shape < 1.
    """
    t = np.asarray(t, dtype=float)
    x = shape * t
    out = np.empty_like(x)
    q = special.gammaincc(shape, x)
    small = (x < shape + 1.0) | (q > _Q_FLOOR)
    if np.any(small):
        xs = x[small]
        with np.errstate(divide="ignore"):
            log_g = np.log(shape) + special.xlogy(shape - 1.0, xs) - xs - special.gammaln(shape)
            log_q = np.log(q[small])
        with np.errstate(over="ignore"):
            out[small] = np.exp(log_g - log_q)
    large = ~small
    if np.any(large):
        xl = x[large]
        out[large] = shape / (xl * _upper_gamma_cf(shape, xl))
    if shape < 1.0:
        # the pole at t=0 is genuine, only saturate strictly positive ages
        pos = t > 0
        out[pos] = _saturate(out[pos])
        return out
    return _saturate(out)


@dataclass(frozen=True)
class CapacityModifier:
    """Logistic attenuation ``scale * max(0, 1 - n/K(t))`` of a base rate.

    Parameters
    ----------
    capacity : float
        Carrying capacity K used before the first schedule entry.
    scale : float
        Multiplier applied to the base rate (the beta_0 of a logistic birth law).
    schedule : tuple of (start_time, K) pairs
        Optional piecewise-constant K(t); entry ``(s, K)`` applies from time ``s``.
    """

    capacity: float
    scale: float = 1.0
    schedule: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if not self.capacity > 0:
            raise ConfigurationError("carrying capacity must be positive")
        if self.scale < 0:
            raise ConfigurationError("capacity scale must be nonnegative")
        starts = [s for s, _ in self.schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigurationError("capacity schedule start times must increase")
        if any(k <= 0 for _, k in self.schedule):
            raise ConfigurationError("scheduled capacities must be positive")

    @property
    def time_dependent(self) -> bool:
        return bool(self.schedule)

    def capacity_at(self, t: float) -> float:
        k = self.capacity
        for start, value in self.schedule:
            if t >= start:
                k = value
            else:
                break
        return k

    def factor(self, n, t: float = 0.0) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        if np.any(n < 0):
            raise DomainError("population size must be nonnegative")
        return self.scale * np.maximum(0.0, 1.0 - n / self.capacity_at(t))

    def factor_sup(self, n, t0: float, t1: float) -> np.ndarray:
        """Largest attenuation factor over the time window ``[t0, t1]`` at fixed n."""
        ks = [self.capacity_at(t0)] + [k for s, k in self.schedule if t0 < s <= t1]
        n = np.asarray(n, dtype=float)
        return self.scale * np.maximum(0.0, 1.0 - n / max(ks))


_KINDS = ("constant", "linear", "gamma_hazard", "tabulated")


@dataclass(frozen=True, eq=False)
class AgeRate:
    """A nonnegative hazard as a function of age, optionally scaled by population size.

    Build instances with the class constructors :meth:`constant`, :meth:`linear`,
    :meth:`gamma_hazard_rate` and :meth:`tabulated`.
    """

    kind: str
    params: tuple[float, ...] = ()
    grid: np.ndarray | None = field(default=None, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)
    capacity: CapacityModifier | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(f"unknown rate kind {self.kind!r}; expected one of {_KINDS}")

    # constructors ---------------------------------------------------------
    @classmethod
    def constant(cls, c: float, capacity: CapacityModifier | None = None) -> "AgeRate":
        if not c >= 0:
            raise ConfigurationError("constant rate must be nonnegative")
        return cls("constant", (float(c),), capacity=capacity)

    @classmethod
    def linear(
        cls, slope: float, intercept: float = 0.0, capacity: CapacityModifier | None = None
    ) -> "AgeRate":
        if slope < 0 or intercept < 0:
            raise ConfigurationError("linear rate needs nonnegative slope and intercept")
        return cls("linear", (float(slope), float(intercept)), capacity=capacity)

    @classmethod
    def gamma_hazard_rate(
        cls, alpha: float, weight: float = 1.0, capacity: CapacityModifier | None = None
    ) -> "AgeRate":
        """``weight * g/(1-G)`` for the unit-mean Gamma law of shape ``alpha``."""
        if not alpha > 0:
            raise ConfigurationError("gamma shape must be positive")
        if weight < 0:
            raise ConfigurationError("gamma hazard weight must be nonnegative")
        return cls("gamma_hazard", (float(alpha), float(weight)), capacity=capacity)

    @classmethod
    def tabulated(
        cls, grid: Sequence[float], values: Sequence[float], capacity: CapacityModifier | None = None
    ) -> "AgeRate":
        g = np.array(grid, dtype=float)
        v = np.array(values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ConfigurationError("tabulated rate needs matching 1-D grid and values (>= 2 nodes)")
        if np.any(np.diff(g) <= 0):
            raise ConfigurationError("tabulated grid must be strictly increasing")
        if g[0] != 0.0:
            raise ConfigurationError("tabulated grid must start at age 0")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ConfigurationError("tabulated values must be finite and nonnegative")
        g.flags.writeable = False
        v.flags.writeable = False
        return cls("tabulated", (), grid=g, values=v, capacity=capacity)

    @classmethod
    def from_csv(cls, path: str | Path, capacity: CapacityModifier | None = None) -> "AgeRate":
        """Read a two-column ``age, rate`` table; a non-numeric header row is skipped."""
        ages, rates = [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    a, r = float(row[0]), float(row[1])
                except ValueError:
                    if ages:
                        raise ConfigurationError(f"non-numeric row in {path}: {row}")
                    continue
                ages.append(a)
                rates.append(r)
        return cls.tabulated(ages, rates, capacity=capacity)

    def with_capacity(self, capacity: CapacityModifier | None) -> "AgeRate":
        return AgeRate(self.kind, self.params, self.grid, self.values, capacity)

    # properties -----------------------------------------------------------
    @property
    def population_dependent(self) -> bool:
        return self.capacity is not None

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    @property
    def is_zero(self) -> bool:
        if self.kind == "constant":
            return self.params[0] == 0.0
        if self.kind == "linear":
            return self.params == (0.0, 0.0)
        if self.kind == "gamma_hazard":
            return self.params[1] == 0.0
        return bool(np.all(self.values == 0.0))

    @property
    def bounded_near_zero(self) -> bool:
        """False only for Gamma hazards with shape < 1 (pole at age 0)."""
        return not (self.kind == "gamma_hazard" and self.params[0] < 1.0)

    # evaluation -----------------------------------------------------------
    def base(self, a) -> np.ndarray:
        """Population-independent part of the hazard at age ``a``."""
        a = np.asarray(a, dtype=float)
        _check_ages(a)
        if self.kind == "constant":
            return np.full_like(a, self.params[0])
        if self.kind == "linear":
            slope, intercept = self.params
            return intercept + slope * a
        if self.kind == "gamma_hazard":
            alpha, weight = self.params
            if weight == 0.0:
                return np.zeros_like(a)
            return weight * gamma_hazard(alpha, a)
        return np.interp(a, self.grid, self.values)

    def __call__(self, a, n=0, t: float = 0.0) -> np.ndarray:
        return self.eval(a, n, t)

    def eval(self, a, n=0, t: float = 0.0) -> np.ndarray:
        """Hazard at age ``a`` in a population of size ``n`` at time ``t``."""
        h = self.base(a)
        if self.capacity is not None:
            h = h * self.capacity.factor(n, t)
        return h

    def cumulative(self, a) -> np.ndarray:
        """Exact integral of the base hazard over ``[0, a]``."""
        a = np.asarray(a, dtype=float)
        _check_ages(a)
        if self.kind == "constant":
            return self.params[0] * a
        if self.kind == "linear":
            slope, intercept = self.params
            return intercept * a + 0.5 * slope * a * a
        if self.kind == "gamma_hazard":
            alpha, weight = self.params
            if weight == 0.0:
                return np.zeros_like(a)
            return -weight * log_gamma_sf(alpha, alpha * a)
        g, v = self.grid, self.values
        nodes = np.concatenate(([0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(g))))
        k = np.clip(np.searchsorted(g, a, side="right") - 1, 0, g.size - 2)
        d = a - g[k]
        width = g[k + 1] - g[k]
        slope = (v[k + 1] - v[k]) / width
        inside = nodes[k] + v[k] * d + 0.5 * slope * d * d
        beyond = nodes[-1] + v[-1] * (a - g[-1])
        return np.where(a > g[-1], beyond, inside)

    def sup(self, a_lo, a_hi, n=0, t0: float = 0.0, t1: float | None = None) -> np.ndarray:
        """Upper bound of the hazard over ages ``[a_lo, a_hi]`` and times ``[t0, t1]``.

        Exact (attained) for every kind with a bounded hazard.
        """
        lo = np.asarray(a_lo, dtype=float)
        hi = np.asarray(a_hi, dtype=float)
        lo, hi = np.broadcast_arrays(lo, hi)
        if self.kind == "constant":
            s = np.full(lo.shape, self.params[0])
        elif self.kind == "linear":
            s = self.base(hi)
        elif self.kind == "gamma_hazard":
            if self.params[0] < 1.0:
                raise ConfigurationError("gamma shape < 1 has no bounded majorant near age 0")
            # increasing failure rate for shape >= 1
            s = self.base(hi)
        else:
            s = np.maximum(self.base(lo), self.base(hi)).ravel()
            g, v = self.grid, self.values
            i0 = np.searchsorted(g, lo.ravel(), side="right")
            i1 = np.searchsorted(g, hi.ravel(), side="right")
            # interior nodes inside the window can exceed both endpoints
            for idx in np.flatnonzero(i1 > i0):
                s[idx] = max(s[idx], v[i0[idx]:i1[idx]].max())
            s = s.reshape(lo.shape)
        if self.capacity is not None:
            t1 = t0 if t1 is None else t1
            s = s * self.capacity.factor_sup(n, t0, t1)
        return s


def eval_rate(rate: AgeRate, a, n=0, t: float = 0.0) -> np.ndarray:
    """Evaluate ``rate`` at age ``a`` and population size ``n``.

    Raises
    ------
    DomainError
        For negative ages or population sizes.
    """
    return rate.eval(a, n, t)


def propagator(mu: AgeRate, a1, a2) -> np.ndarray:
    """Survival factor ``exp(-int_{a1}^{a2} mu)`` of the base hazard.

    Raises
    ------
    DomainError
        If ``a1 > a2`` anywhere.
    """
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    if np.any(a1 > a2):
        raise DomainError("propagator requires a1 <= a2")
    return np.exp(-(mu.cumulative(a2) - mu.cumulative(a1)))


@dataclass(frozen=True)
class GammaBranching:
    """Unit-mean Gamma branching time with death/fission probabilities a0 and a2.

    The density is ``alpha**alpha / Gamma(alpha) * t**(alpha-1) * exp(-alpha t)``.
    """

    alpha: float
    a0: float = 0.0
    a2: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if self.a0 < 0 or self.a2 < 0 or abs(self.a0 + self.a2 - 1.0) > 1e-12:
            raise ConfigurationError("a0 and a2 must be nonnegative and sum to 1")

    @classmethod
    def with_fission_probability(cls, alpha: float, a2: float) -> "GammaBranching":
        return cls(alpha=alpha, a0=1.0 - a2, a2=a2)

    def _t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("time must be nonnegative")
        return t

    def log_pdf(self, t) -> np.ndarray:
        t = self._t(t)
        al = self.alpha
        with np.errstate(divide="ignore"):
            return al * np.log(al) - special.gammaln(al) + special.xlogy(al - 1.0, t) - al * t

    def pdf(self, t) -> np.ndarray:
        return np.exp(self.log_pdf(t))

    def cdf(self, t) -> np.ndarray:
        return special.gammainc(self.alpha, self.alpha * self._t(t))

    def sf(self, t) -> np.ndarray:
        return np.exp(log_gamma_sf(self.alpha, self.alpha * self._t(t)))

    def hazard(self, t) -> np.ndarray:
        return gamma_hazard(self.alpha, self._t(t))

    def fission_rate(self) -> AgeRate:
        return AgeRate.gamma_hazard_rate(self.alpha, self.a2)

    def death_rate(self) -> AgeRate:
        return AgeRate.gamma_hazard_rate(self.alpha, self.a0)


def gamma_pdf_cdf_hazard(dist: GammaBranching, t):
    """Return ``(g, G, g/(1-G))`` for the Gamma branching law at time ``t``."""
    return dist.pdf(t), dist.cdf(t), dist.hazard(t)
