"""Mean field of the binary fission-death process and the Bellman-Harris mean.

Time of birth (TOB) ``x`` labels each cohort. A doublet born at ``x`` holds two
twins with a common survival ``U(x; x, t) = exp(-int_0^{t-x} gamma)``, where
``gamma = beta + mu``. In expectation a cohort splits into

    Y(x, t) = B(x) U**2          (both twins alive, still a doublet)
    X(x, t) = 2 B(x) U (1 - U)   (one twin alive, now a singlet)

so ``T = X + 2Y = 2 B(x) U``. The doublet creation rate ``B`` solves a renewal
equation with kernel ``2 U beta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .detsolve import (
    ConvolutionKernel,
    GridFunction,
    _require_mean_field_rates,
    solve_volterra,
    steps_for,
    trapezoid_weights,
)
from .errors import ConfigurationError, DomainError
from .rates import AgeRate, GammaBranching

__all__ = [
    "FissionMeanField",
    "solve_fission_B",
    "eval_XYT",
    "total_population",
    "bellman_harris_mean",
]


@dataclass(eq=False)
class FissionMeanField:
    """Solved doublet creation rate ``B`` with the data needed to evaluate X, Y and T.

    Initial cohorts are given by age at time zero (``a = -x``): ``singlets0`` and
    ``doublets0`` are densities on the solver's age grid, and ``point_singlets``
    counts age-zero founders held as exact point masses.
    """

    h: float
    B: GridFunction
    beta: AgeRate = field(repr=False)
    mu: AgeRate = field(repr=False)
    cum_gamma: np.ndarray = field(repr=False)
    singlets0: np.ndarray = field(repr=False)
    doublets0: np.ndarray = field(repr=False)
    point_singlets: float = 0.0

    @property
    def n_times(self) -> int:
        return self.B.values.size

    @property
    def horizon(self) -> float:
        return self.h * (self.n_times - 1)

    @property
    def times(self) -> np.ndarray:
        return self.B.nodes

    def survival(self, age_from, age_to) -> np.ndarray:
        """Single-individual survival between two ages, ``exp(-int gamma)``."""
        a0 = np.asarray(age_from, dtype=float)
        a1 = np.asarray(age_to, dtype=float)
        return np.exp(-(self.beta.cumulative(a1) + self.mu.cumulative(a1)
                        - self.beta.cumulative(a0) - self.mu.cumulative(a0)))

    def _U_lag(self, j: int) -> np.ndarray:
        """``U(x_k; x_k, t_j)`` for ``k = 0..j`` (lag ``j - k``)."""
        return np.exp(-self.cum_gamma[j - np.arange(j + 1)])

    @cached_property
    def _beta_ages(self) -> np.ndarray:
        return self.beta.base(self.h * np.arange(self.cum_gamma.size))

    def _founder_survival(self, j: int) -> np.ndarray:
        """Survival of initial cohorts (ages ``k*h`` at time 0) up to ``t_j``."""
        n0 = self.singlets0.size
        k = np.arange(n0)
        return np.exp(self.cum_gamma[k] - self.cum_gamma[k + j])

    def _has_density(self) -> bool:
        return self.singlets0.size > 1 and bool(np.any(self.singlets0) or np.any(self.doublets0))

    def founder_terms(self, j: int) -> float:
        """Expected founders (and founder twins) alive at ``t_j``."""
        s = self.point_singlets * float(np.exp(-self.cum_gamma[j]))
        if self._has_density():
            dens = (self.singlets0 + 2.0 * self.doublets0) * self._founder_survival(j)
            s += float(trapezoid_weights(dens.size, self.h) @ dens)
        return s

    def total(self, j: int) -> float:
        born = 0.0
        if j > 0:
            born = 2.0 * float(trapezoid_weights(j + 1, self.h) @ (self.B.values[: j + 1] * self._U_lag(j)))
        return born + self.founder_terms(j)

    @cached_property
    def T_total(self) -> GridFunction:
        n = self.n_times
        b = self.B.values
        u = np.exp(-self.cum_gamma[:n])
        conv = np.convolve(b, u)[:n]
        born = 2.0 * self.h * (conv - 0.5 * (b[0] * u + b * u[0]))
        born[0] = 0.0
        founders = np.array([self.founder_terms(j) for j in range(n)])
        return GridFunction(0.0, self.h, born + founders)

    def grid_fields(self, stride: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(x, t, X, Y, T)`` for newborn cohorts ``0 <= x <= t`` on a strided grid."""
        idx = np.arange(0, self.n_times, stride)
        jj, kk = np.meshgrid(idx, idx, indexing="ij")
        mask = kk <= jj
        j, k = jj[mask], kk[mask]
        u = np.exp(-self.cum_gamma[j - k])
        b = self.B.values[k]
        X = 2.0 * b * u * (1.0 - u)
        Y = b * u * u
        return self.h * k, self.h * j, X, Y, X + 2.0 * Y

    def boundary_residual(self) -> np.ndarray:
        """``int (X + 2Y)(z, t) beta(t - z) dz + founder inflow - B(t)`` at every node."""
        n = self.n_times
        b = self.B.values
        k = 2.0 * np.exp(-self.cum_gamma[:n]) * self._beta_ages[:n]
        conv = np.convolve(b, k)[:n]
        inflow = self.h * (conv - 0.5 * (b[0] * k + b * k[0]))
        inflow[0] = 0.0
        forcing = np.array([self._founder_forcing(j) for j in range(n)])
        return inflow + forcing - b

    def _founder_forcing(self, j: int) -> float:
        f = self.point_singlets * float(np.exp(-self.cum_gamma[j]) * self._beta_ages[j])
        if self._has_density():
            k = np.arange(self.singlets0.size)
            dens = (self.singlets0 + 2.0 * self.doublets0) * self._founder_survival(j) * self._beta_ages[k + j]
            f += float(trapezoid_weights(dens.size, self.h) @ dens)
        return f


def solve_fission_B(
    beta: AgeRate,
    mu: AgeRate,
    horizon: float,
    dt: float = 1e-3,
    singlets0: GridFunction | None = None,
    doublets0: GridFunction | None = None,
    point_singlets: float | None = None,
) -> FissionMeanField:
    """Solve the renewal equation for the doublet creation rate ``B(t)``.

    Parameters
    ----------
    beta, mu : AgeRate
        Fission and death hazards; ``gamma = beta + mu``.
    horizon, dt : float
        Final time and step.
    singlets0, doublets0 : GridFunction, optional
        Initial singlet and doublet densities over age at time zero (``a = -x``),
        on a grid starting at 0 with step ``dt``.
    point_singlets : float, optional
        Number of age-zero singlet founders. Defaults to 1 when no densities are given.

    Raises
    ------
    ConfigurationError
        For population-dependent or weakly singular (Gamma shape < 1) hazards.
    """
    _require_mean_field_rates(beta, mu)
    if point_singlets is None:
        point_singlets = 1.0 if singlets0 is None and doublets0 is None else 0.0
    nt = steps_for(horizon, dt) + 1
    s0, d0 = _initial_arrays(singlets0, doublets0, dt)
    n0 = s0.size
    ages = dt * np.arange(nt + max(n0, 1))
    cum_gamma = beta.cumulative(ages) + mu.cumulative(ages)
    beta_a = beta.base(ages)
    lag = 2.0 * beta_a[:nt] * np.exp(-cum_gamma[:nt])

    forcing = point_singlets * beta_a[:nt] * np.exp(-cum_gamma[:nt])
    if n0 > 1 and (np.any(s0) or np.any(d0)):
        w = trapezoid_weights(n0, dt) * (s0 + 2.0 * d0) * np.exp(cum_gamma[:n0])
        for i in range(nt):
            forcing[i] += w @ (beta_a[i:i + n0] * np.exp(-cum_gamma[i:i + n0]))
    B = solve_volterra(ConvolutionKernel(lag), GridFunction(0.0, dt, forcing))
    return FissionMeanField(dt, B, beta, mu, cum_gamma, s0, d0, float(point_singlets))


def _initial_arrays(singlets0, doublets0, dt):
    arrays = []
    for gf in (singlets0, doublets0):
        if gf is None:
            arrays.append(None)
            continue
        if gf.t0 != 0.0 or abs(gf.dt - dt) > 1e-12 * dt:
            raise ConfigurationError("initial densities must use the solver grid (start 0, same step)")
        if np.any(gf.values < 0):
            raise DomainError("initial densities must be nonnegative")
        arrays.append(gf.values)
    size = max([a.size for a in arrays if a is not None], default=0)
    out = []
    for a in arrays:
        z = np.zeros(size)
        if a is not None:
            z[: a.size] = a
        out.append(z)
    return out[0], out[1]


def eval_XYT(field_: FissionMeanField, x: float, t: float) -> tuple[float, float, float]:
    """Singlet, doublet and total densities for TOB ``x`` at time ``t``.

    ``x >= 0`` uses the newborn cohort formulas with ``B(x)`` interpolated on the
    grid; ``x < 0`` propagates the initial densities. Point-mass founders are
    reported by :meth:`FissionMeanField.founder_terms`.

    Raises
    ------
    DomainError
        If ``x > t`` or ``t`` is outside the solved horizon.
    """
    if x > t:
        raise DomainError("no cohort can be born after the observation time")
    if t < 0 or t > field_.horizon + 1e-12:
        raise DomainError(f"t={t} outside [0, {field_.horizon}]")
    if x >= 0:
        u = float(field_.survival(0.0, t - x))
        b = float(field_.B(x))
        X = 2.0 * b * u * (1.0 - u)
        Y = b * u * u
    else:
        a0 = -x
        grid = field_.h * np.arange(field_.singlets0.size)
        s0 = float(np.interp(a0, grid, field_.singlets0, right=0.0)) if grid.size > 1 else 0.0
        d0 = float(np.interp(a0, grid, field_.doublets0, right=0.0)) if grid.size > 1 else 0.0
        u = float(field_.survival(a0, a0 + t))
        X = s0 * u + 2.0 * d0 * u * (1.0 - u)
        Y = d0 * u * u
    return X, Y, X + 2.0 * Y


def total_population(field_: FissionMeanField, t: float | None = None):
    """Expected population ``T(t)``; the full :class:`GridFunction` when ``t`` is None."""
    if t is None:
        return field_.T_total
    j = steps_for(t, field_.h)
    if not 0 <= j < field_.n_times:
        raise DomainError(f"t={t} outside [0, {field_.horizon}]")
    return float(field_.T_total.values[j])


def bellman_harris_mean(
    dist: GammaBranching | GridFunction,
    horizon: float,
    dt: float = 1e-3,
    a2: float | None = None,
) -> GridFunction:
    """Mean size of a Bellman-Harris binary process from one age-zero ancestor.

    Solves ``T(t) = 1 - G(t) + 2 a2 int_0^t g(t - s) T(s) ds``.

    Parameters
    ----------
    dist : GammaBranching or GridFunction
        Lifetime law; a ``GridFunction`` is a tabulated density ``g`` on ``[0, horizon]``.
    a2 : float, optional
        Fission probability; required for a tabulated density, taken from ``dist`` otherwise.
    """
    n = steps_for(horizon, dt) + 1
    t = dt * np.arange(n)
    if isinstance(dist, GammaBranching):
        if dist.alpha < 1.0:
            raise ConfigurationError("gamma shape < 1 gives a weakly singular kernel; not supported")
        g = dist.pdf(t)
        G = dist.cdf(t)
        p2 = dist.a2 if a2 is None else a2
    else:
        if a2 is None:
            raise ConfigurationError("a tabulated lifetime density needs an explicit a2")
        if dist.t0 != 0.0 or abs(dist.dt - dt) > 1e-12 * dt or len(dist) < n:
            raise ConfigurationError("tabulated density must cover [0, horizon] on the solver grid")
        g = dist.values[:n]
        if np.any(g < 0):
            raise DomainError("lifetime density must be nonnegative")
        G = np.concatenate(([0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * dt)))
        p2 = a2
    return solve_volterra(ConvolutionKernel(2.0 * p2 * g), GridFunction(0.0, dt, 1.0 - G))
