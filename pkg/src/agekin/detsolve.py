"""Deterministic solvers: renewal equations, age transport, master equation, Leslie projection."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigurationError, DomainError, IllConditionedStepError, TruncationWarning
from .rates import AgeRate

__all__ = [
    "GridFunction",
    "GridFunction2D",
    "ConvolutionKernel",
    "solve_volterra",
    "MvfSolution",
    "solve_mvf",
    "MasterState",
    "MasterTrajectory",
    "master_evolve",
    "LeslieModel",
    "leslie_project",
    "steps_for",
    "TAIL_MASS_CUTOFF",
]

TAIL_MASS_CUTOFF = 1e-10
_ILL_CONDITIONED = 1e-8


def steps_for(span: float, dt: float) -> int:
    """Number of ``dt`` steps covering ``span``; the span must be a multiple of ``dt``."""
    k = span / dt
    r = round(k)
    if abs(k - r) > 1e-7 * max(1.0, abs(k)):
        raise ConfigurationError(f"span {span} is not a multiple of the step {dt}")
    return int(r)


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples of a function on the uniform grid ``t0 + i*dt``, ``i = 0..len-1``."""

    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ConfigurationError("GridFunction values must be one-dimensional")
        if not self.dt > 0:
            raise ConfigurationError("grid step must be positive")
        if v.size < 2:
            raise ConfigurationError("a grid function needs at least two nodes")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, f: Callable, t0: float, t1: float, dt: float) -> "GridFunction":
        n = steps_for(t1 - t0, dt)
        nodes = t0 + dt * np.arange(n + 1)
        return cls(t0, dt, np.asarray(f(nodes), dtype=float) * np.ones(n + 1))

    def __len__(self) -> int:
        return self.values.size

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.size)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (self.values.size - 1)

    def index_of(self, t: float) -> int:
        """Index of the node at ``t``; raises if ``t`` is not a node."""
        i = steps_for(t - self.t0, self.dt)
        if not 0 <= i < self.values.size:
            raise DomainError(f"{t} lies outside the grid [{self.t0}, {self.t_end}]")
        return i

    def __call__(self, t):
        """Piecewise-linear interpolation; zero outside the grid."""
        return np.interp(t, self.nodes, self.values, left=0.0, right=0.0)

    def integral(self) -> float:
        """Trapezoid rule over the full grid."""
        return float(trapezoid_weights(self.values.size, self.dt) @ self.values)


@dataclass(frozen=True, eq=False)
class GridFunction2D:
    """Samples ``values[j, k]`` at time ``t0 + j*dt`` and age ``a0 + k*da``."""

    t0: float
    dt: float
    a0: float
    da: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or min(v.shape) < 2:
            raise ConfigurationError("2-D grid function needs a (>=2, >=2) array")
        if not (self.dt > 0 and self.da > 0):
            raise ConfigurationError("grid steps must be positive")
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.shape[0])

    @property
    def ages(self) -> np.ndarray:
        return self.a0 + self.da * np.arange(self.values.shape[1])

    def integral(self) -> float:
        wt = trapezoid_weights(self.values.shape[0], self.dt)
        wa = trapezoid_weights(self.values.shape[1], self.da)
        return float(wt @ self.values @ wa)


@dataclass(frozen=True, eq=False)
class ConvolutionKernel:
    """A difference kernel ``K(t, s) = lag[(t - s)/dt]`` sampled on the solver grid."""

    lag: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lag", np.asarray(self.lag, dtype=float))


def solve_volterra(kernel, forcing: GridFunction) -> GridFunction:
    """Solve ``B(t) = f(t) + int_{t0}^t K(t, s) B(s) ds`` by the trapezoid rule.

    Parameters
    ----------
    kernel : ConvolutionKernel or callable
        Either sampled lags ``K(i*dt)`` (length at least ``len(forcing)``) or a
        callable ``kernel(t, s)`` that accepts a scalar ``t`` and an array ``s``.
    forcing : GridFunction
        Right-hand side sampled on the solution grid.

    Returns
    -------
    GridFunction
        ``B`` on the forcing grid, second-order accurate in ``dt``.

    Raises
    ------
    IllConditionedStepError
        When ``|1 - dt/2 K(t, t)| < 1e-8`` at some node.
    """
    f = forcing.values
    h = forcing.dt
    n = f.size
    out = np.empty(n)
    out[0] = f[0]
    if isinstance(kernel, ConvolutionKernel):
        lag = kernel.lag
        if lag.size < n:
            raise ConfigurationError("convolution kernel is shorter than the forcing grid")
        diag = 1.0 - 0.5 * h * lag[0]
        if abs(diag) < _ILL_CONDITIONED:
            raise IllConditionedStepError(f"diagonal coefficient {diag:.3e} at every step")
        for i in range(1, n):
            acc = 0.5 * lag[i] * out[0]
            if i > 1:
                acc += lag[i - 1:0:-1] @ out[1:i]
            out[i] = (f[i] + h * acc) / diag
        return GridFunction(forcing.t0, h, out)

    nodes = forcing.nodes
    for i in range(1, n):
        k = np.asarray(kernel(nodes[i], nodes[: i + 1]), dtype=float) * np.ones(i + 1)
        diag = 1.0 - 0.5 * h * k[i]
        if abs(diag) < _ILL_CONDITIONED:
            raise IllConditionedStepError(f"diagonal coefficient {diag:.3e} at t={nodes[i]}")
        acc = 0.5 * k[0] * out[0] + k[1:i] @ out[1:i]
        out[i] = (f[i] + h * acc) / diag
    return GridFunction(forcing.t0, h, out)


def _require_mean_field_rates(*rates: AgeRate) -> None:
    for r in rates:
        if r.population_dependent:
            raise ConfigurationError("deterministic solvers need population-independent rates")
        if not r.bounded_near_zero:
            raise ConfigurationError("gamma shape < 1 gives a weakly singular kernel; not supported")


def _truncate_tail(values: np.ndarray, h: float) -> np.ndarray:
    """Drop trailing nodes whose integrated mass is below ``TAIL_MASS_CUTOFF`` of the total."""
    w = trapezoid_weights(values.size, h)
    mass = w * values
    total = mass.sum()
    if total <= 0:
        return values[:2].copy()
    tail = np.cumsum(mass[::-1])[::-1]
    keep = np.flatnonzero(tail > TAIL_MASS_CUTOFF * total)
    last = max(int(keep[-1]) + 1, 1) if keep.size else 1
    return values[: last + 1].copy()


@dataclass(eq=False)
class MvfSolution:
    """Solution of the age-transport (McKendrick-von Foerster) problem on a ``da = dt`` grid.

    Attributes
    ----------
    B : GridFunction
        Newborn flux ``rho(0, t)``.
    g : np.ndarray
        Initial density on ages ``k*h`` (zero-padded to the full age grid).
    """

    h: float
    n_times: int
    B: GridFunction
    g: np.ndarray
    cum_mu: np.ndarray
    beta: AgeRate = field(repr=False)
    mu: AgeRate = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.n_times)

    @property
    def ages(self) -> np.ndarray:
        return self.h * np.arange(self.g.size)

    @property
    def horizon(self) -> float:
        return self.h * (self.n_times - 1)

    def time_index(self, t: float) -> int:
        j = steps_for(t, self.h)
        if not 0 <= j < self.n_times:
            raise DomainError(f"time {t} outside [0, {self.horizon}]")
        return j

    def born_branch(self, j: int) -> np.ndarray:
        """Density of individuals born after time 0, ages ``0..t_j`` (includes the seam)."""
        k = np.arange(j + 1)
        return self.B.values[j - k] * np.exp(-self.cum_mu[k])

    def initial_branch(self, j: int) -> np.ndarray:
        """Density of surviving founders, ages ``t_j..`` (includes the seam)."""
        k = np.arange(j, self.g.size)
        return self.g[k - j] * np.exp(self.cum_mu[k - j] - self.cum_mu[k])

    def rho_at(self, j: int) -> np.ndarray:
        """``rho(a_k, t_j)`` over the full age grid; the seam ``a = t`` takes the born branch."""
        out = np.empty(self.g.size)
        out[: j + 1] = self.born_branch(j)
        out[j + 1:] = self.initial_branch(j)[1:]
        return out

    @cached_property
    def rho(self) -> GridFunction2D:
        vals = np.vstack([self.rho_at(j) for j in range(self.n_times)])
        return GridFunction2D(0.0, self.h, 0.0, self.h, vals)

    def total(self, j: int) -> float:
        """Total population at ``t_j``; each branch integrated up to the seam separately."""
        born = self.born_branch(j)
        init = self.initial_branch(j)
        s = 0.0
        if born.size > 1:
            s += float(trapezoid_weights(born.size, self.h) @ born)
        if init.size > 1:
            s += float(trapezoid_weights(init.size, self.h) @ init)
        return s

    def total_population(self) -> GridFunction:
        return GridFunction(0.0, self.h, np.array([self.total(j) for j in range(self.n_times)]))


def solve_mvf(g: GridFunction, beta: AgeRate, mu: AgeRate, horizon: float) -> MvfSolution:
    """Solve the McKendrick-von Foerster equation by characteristics plus a renewal equation.

    Parameters
    ----------
    g : GridFunction
        Initial age density on ages ``0, h, 2h, ...``; ``h`` is also the time step.
    beta, mu : AgeRate
        Population-independent birth and death hazards.
    horizon : float
        Final time, a multiple of ``h``.

    Raises
    ------
    DomainError
        If the initial density is negative somewhere.
    ConfigurationError
        For population-dependent or singular rates, or a grid not starting at age 0.
    """
    if np.any(g.values < 0):
        raise DomainError("initial density must be nonnegative")
    if g.t0 != 0.0:
        raise ConfigurationError("initial density grid must start at age 0")
    _require_mean_field_rates(beta, mu)
    h = g.dt
    nt = steps_for(horizon, h) + 1
    g_vals = _truncate_tail(g.values, h)
    ng = g_vals.size
    na = ng + nt - 1
    ages = h * np.arange(na)
    cum_mu = mu.cumulative(ages)
    beta_a = beta.base(ages)

    lag = beta_a[:nt] * np.exp(-cum_mu[:nt])
    forcing = np.empty(nt)
    w = trapezoid_weights(ng, h)
    wg = w * g_vals * np.exp(cum_mu[:ng])
    for i in range(nt):
        forcing[i] = wg @ (beta_a[i:i + ng] * np.exp(-cum_mu[i:i + ng]))
    B = solve_volterra(ConvolutionKernel(lag), GridFunction(0.0, h, forcing))
    padded = np.zeros(na)
    padded[:ng] = g_vals
    return MvfSolution(h, nt, B, padded, cum_mu, beta, mu)


# master equation ---------------------------------------------------------------


def _per_capita(rate, n: np.ndarray) -> np.ndarray:
    if isinstance(rate, AgeRate):
        if rate.kind != "constant":
            raise ConfigurationError("master equation needs age-independent rates")
        return rate.eval(0.0, n)
    if callable(rate):
        return np.asarray(rate(n), dtype=float) * np.ones(n.size)
    arr = np.asarray(rate, dtype=float)
    if arr.ndim == 0:
        return np.full(n.size, float(arr))
    if arr.size < n.size:
        arr = np.concatenate([arr, np.full(n.size - arr.size, arr[-1])])
    return arr[: n.size]


@dataclass(frozen=True, eq=False)
class MasterState:
    """Population-size distribution over ``0..n_max`` at a given time."""

    pmf: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ConfigurationError("pmf must be a nonempty 1-D array")
        if np.any(p < -1e-12):
            raise DomainError("pmf entries must be nonnegative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise DomainError(f"pmf sums to {p.sum():.12f}, not 1")
        object.__setattr__(self, "pmf", np.clip(p, 0.0, None))

    @classmethod
    def point(cls, n0: int, n_max: int | None = None) -> "MasterState":
        size = (n_max if n_max is not None else n0) + 1
        p = np.zeros(size)
        p[n0] = 1.0
        return cls(p)

    @property
    def n_max(self) -> int:
        return self.pmf.size - 1

    @property
    def mean(self) -> float:
        return float(np.arange(self.pmf.size) @ self.pmf)

    @property
    def var(self) -> float:
        n = np.arange(self.pmf.size)
        m = self.mean
        return float(((n - m) ** 2) @ self.pmf)


@dataclass(frozen=True, eq=False)
class MasterTrajectory:
    """States at the requested output times and the mass that reached the truncation boundary."""

    states: list[MasterState]
    leakage: float
    n_max: int

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.states])

    def at(self, t: float) -> MasterState:
        for s in self.states:
            if abs(s.time - t) <= 1e-12 * max(1.0, abs(t)):
                return s
        raise DomainError(f"time {t} is not an output time")


def _deterministic_mean(beta_n, mu_n, n0: float, horizon: float) -> float:
    def rhs(_t, m):
        nn = np.array([max(m[0], 0.0)])
        return [(_per_capita(beta_n, np.round(nn))[0] - _per_capita(mu_n, np.round(nn))[0]) * m[0]]

    sol = solve_ivp(rhs, (0.0, horizon), [n0], rtol=1e-8)
    return float(sol.y[0, -1])


def master_evolve(
    beta_n,
    mu_n,
    init: MasterState,
    horizon: float,
    output_times: Sequence[float] | None = None,
    n_max: int | None = None,
    leak_tol: float = 1e-9,
    max_doublings: int = 6,
) -> MasterTrajectory:
    """Integrate the forward master equation for a birth-death population size.

    Parameters
    ----------
    beta_n, mu_n : float, array, callable or constant AgeRate
        Per-capita birth and death rates as functions of the size ``n``.
    init : MasterState
        Initial distribution.
    horizon : float
        Final time.
    output_times : sequence of float, optional
        Defaults to ``[0, horizon]``.
    n_max : int, optional
        Truncation size; defaults to 8x the deterministic mean at the horizon and is
        doubled while the boundary leakage exceeds ``leak_tol``.

    Notes
    -----
    The boundary state is reflecting (births out of ``n_max`` are suppressed), so the
    pmf sums to one; the suppressed flux is integrated as the reported ``leakage``.
    """
    if output_times is None:
        output_times = [0.0, horizon]
    ts = np.array(sorted(output_times), dtype=float)
    if ts[0] < init.time or ts[-1] > init.time + horizon + 1e-12:
        raise DomainError("output times must lie within the integration window")
    n0_support = int(np.flatnonzero(init.pmf)[-1])
    auto = n_max is None
    if auto:
        mean_h = _deterministic_mean(beta_n, mu_n, max(init.mean, 1e-12), horizon)
        n_max = max(int(math.ceil(8.0 * mean_h)), n0_support + 16)
    n_max = max(n_max, n0_support)

    for attempt in range(max_doublings + 1):
        traj = _integrate_master(beta_n, mu_n, init, ts, n_max)
        if traj.leakage <= leak_tol or not auto or attempt == max_doublings:
            break
        n_max *= 2
    if traj.leakage > leak_tol:
        warnings.warn(
            f"master equation truncation at n_max={n_max} leaked mass {traj.leakage:.3e}",
            TruncationWarning,
            stacklevel=2,
        )
    return traj


def _integrate_master(beta_n, mu_n, init: MasterState, ts: np.ndarray, n_max: int) -> MasterTrajectory:
    n = np.arange(n_max + 1)
    b = _per_capita(beta_n, n) * n
    d = _per_capita(mu_n, n) * n
    if np.any(b < 0) or np.any(d < 0):
        raise DomainError("rates must be nonnegative")
    b_out = b[-1]
    b = b.copy()
    b[-1] = 0.0
    p0 = np.zeros(n_max + 2)
    p0[: min(init.pmf.size, n_max + 1)] = init.pmf[: n_max + 1]

    def rhs(_t, y):
        p = y[:-1]
        dp = -(b + d) * p
        dp[1:] += b[:-1] * p[:-1]
        dp[:-1] += d[1:] * p[1:]
        return np.concatenate([dp, [b_out * p[-1]]])

    t0 = init.time
    if ts[-1] > t0:
        sol = solve_ivp(rhs, (t0, ts[-1]), p0, method="DOP853", t_eval=ts, rtol=1e-11, atol=1e-15)
        if not sol.success:
            raise ArithmeticError(f"master equation integration failed: {sol.message}")
        ys = sol.y.T
    else:
        ys = np.tile(p0, (ts.size, 1))
    states = []
    for t, y in zip(ts, ys):
        p = np.clip(y[:-1], 0.0, None)
        states.append(MasterState(p / p.sum(), float(t)))
    return MasterTrajectory(states, float(ys[-1, -1]), n_max)


# Leslie projection ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LeslieModel:
    """Age-class projection matrix with fecundities ``f`` and survival fractions ``s``.

    ``s[i]`` moves bin ``i`` into bin ``i+1``; the last bin has no successor.
    """

    f: np.ndarray
    s: np.ndarray
    width: float

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if f.ndim != 1 or s.shape != (f.size - 1,):
            raise ConfigurationError("need len(s) == len(f) - 1")
        if np.any(f < 0):
            raise ConfigurationError("fecundities must be nonnegative")
        if np.any((s < 0) | (s > 1)):
            raise ConfigurationError("survival fractions must lie in [0, 1]")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "s", s)

    @classmethod
    def from_rates(cls, beta: AgeRate, mu: AgeRate, width: float, n_bins: int) -> "LeslieModel":
        """Discretize with ``f_i = beta(a_i) * width`` and ``s_i = U(a_i, a_{i+1})``."""
        _require_mean_field_rates(beta, mu)
        a = width * np.arange(n_bins)
        f = beta.base(a) * width
        cm = mu.cumulative(a)
        s = np.exp(-(cm[1:] - cm[:-1]))
        return cls(f, s, width)

    @property
    def matrix(self) -> np.ndarray:
        m = np.zeros((self.f.size, self.f.size))
        m[0] = self.f
        m[np.arange(1, self.f.size), np.arange(self.f.size - 1)] = self.s
        return m


def leslie_project(model: LeslieModel, n0, steps: int) -> np.ndarray:
    """Return the ``(steps + 1, bins)`` trajectory of bin vectors, starting from ``n0``."""
    v = np.asarray(n0, dtype=float)
    if v.shape != model.f.shape:
        raise ConfigurationError(f"bin vector has shape {v.shape}, model has {model.f.shape}")
    out = np.empty((steps + 1, v.size))
    out[0] = v
    for k in range(steps):
        nxt = np.empty_like(v)
        nxt[0] = model.f @ v
        nxt[1:] = model.s * v[:-1]
        out[k + 1] = v = nxt
    return out
