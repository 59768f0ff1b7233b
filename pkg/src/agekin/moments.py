"""Factorial moments of age-structured birth-death populations.

For population-independent rates the k-th factorial moment density obeys a
transport equation with decay ``sum_i mu(a_i)``. Its boundary at a zero age is
fed by births, so ``X2`` is carried along characteristics from the edge

    E(c, tau) = X2(c, 0; tau) = beta(c) X1(c; tau) + int_0^inf beta(y) X2(c, y; tau) dy.

``E`` is discontinuous across the seam ``c = tau`` (the age of a founder's
cohort), so both one-sided values are stored there: the *born* side
(``c -> tau-``) and the *initial* side (``c -> tau+``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detsolve import (
    GridFunction,
    GridFunction2D,
    MvfSolution,
    _require_mean_field_rates,
    solve_mvf,
    steps_for,
    trapezoid_weights,
)
from .errors import ConfigurationError, DomainError
from .rates import AgeRate

__all__ = [
    "StirlingTable",
    "stirling_convert",
    "MomentField1",
    "MomentField2",
    "solve_factorial_moment_k1",
    "solve_factorial_moment_k2",
    "yule_furry_closed",
    "window_mean_var",
]


# Stirling numbers -------------------------------------------------------------


@dataclass(frozen=True)
class StirlingTable:
    """Signed Stirling numbers of the first kind ``s`` and second kind ``S`` up to ``max_order``.

    Entries are Python integers, so conversions of integer moments are exact.
    """

    max_order: int
    s: tuple[tuple[int, ...], ...] = field(init=False, repr=False)
    S: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.max_order < 0:
            raise ConfigurationError("max order must be nonnegative")
        m = self.max_order
        s = [[0] * (m + 1) for _ in range(m + 1)]
        S = [[0] * (m + 1) for _ in range(m + 1)]
        s[0][0] = S[0][0] = 1
        for k in range(1, m + 1):
            for j in range(1, k + 1):
                s[k][j] = s[k - 1][j - 1] - (k - 1) * s[k - 1][j]
                S[k][j] = S[k - 1][j - 1] + j * S[k - 1][j]
        object.__setattr__(self, "s", tuple(map(tuple, s)))
        object.__setattr__(self, "S", tuple(map(tuple, S)))

    def self_test(self, n_max: int = 12) -> bool:
        """Check ``n**k == sum_l S(k,l) (n)_l`` and ``(n)_k == sum_l s(k,l) n**l`` on integers."""
        for n in range(n_max + 1):
            for k in range(self.max_order + 1):
                falling = [math.perm(n, j) for j in range(k + 1)]
                if n**k != sum(self.S[k][j] * falling[j] for j in range(k + 1)):
                    return False
                if falling[k] != sum(self.s[k][j] * n**j for j in range(k + 1)):
                    return False
        return True


def stirling_convert(table: StirlingTable, moments: Sequence, to: str = "raw") -> list:
    """Convert window-integrated moments between factorial and raw forms.

    Parameters
    ----------
    table : StirlingTable
    moments : sequence
        ``moments[k-1]`` is the order-k moment, ``k = 1..K``.
    to : {"raw", "factorial"}
        ``"raw"`` maps ``E[(N)_k]`` to ``E[N**k]`` with ``S``; ``"factorial"`` maps back with ``s``.

    Raises
    ------
    ConfigurationError
        If ``K`` exceeds the table order or ``to`` is unknown.
    """
    K = len(moments)
    if K > table.max_order:
        raise ConfigurationError(f"order {K} exceeds table order {table.max_order}")
    if to == "raw":
        coef = table.S
    elif to == "factorial":
        coef = table.s
    else:
        raise ConfigurationError("to must be 'raw' or 'factorial'")
    return [sum(coef[k][j] * moments[j - 1] for j in range(1, k + 1)) for k in range(1, K + 1)]


# first moment ------------------------------------------------------------------


def _node(x: float, h: float, what: str) -> int:
    try:
        return steps_for(x, h)
    except ConfigurationError:
        raise ConfigurationError(f"{what} {x} is not a grid node (step {h})") from None


@dataclass(eq=False)
class MomentField1:
    """Mean age density ``X1(a; t)`` on a ``da = dt`` grid; a thin view of :class:`MvfSolution`."""

    sol: MvfSolution
    k: int = 1

    @property
    def h(self) -> float:
        return self.sol.h

    @property
    def n_times(self) -> int:
        return self.sol.n_times

    @property
    def n_ages(self) -> int:
        return self.sol.g.size

    @property
    def horizon(self) -> float:
        return self.sol.horizon

    @property
    def cum_mu(self) -> np.ndarray:
        return self.sol.cum_mu

    @property
    def init_support(self) -> int:
        """Number of age nodes carrying initial density."""
        nz = np.flatnonzero(self.sol.g)
        return int(nz[-1]) + 1 if nz.size else 1

    def time_index(self, t: float) -> int:
        return self.sol.time_index(t)

    def born(self, i, j) -> np.ndarray:
        """``X1`` at age index ``i <= j`` on the born side."""
        i = np.asarray(i)
        return self.sol.B.values[j - i] * np.exp(-self.cum_mu[i])

    def initial(self, d, j) -> np.ndarray:
        """``X1`` at age index ``j + d`` (``d >= 0``) on the founder side."""
        d = np.asarray(d)
        return self.sol.g[d] * np.exp(self.cum_mu[d] - self.cum_mu[d + j])

    def value(self, a: float, t: float, side: str = "born") -> float:
        """``X1(a; t)`` at grid nodes; ``side`` picks the limit on the seam ``a = t``."""
        j = self.time_index(t)
        i = _node(a, self.h, "age")
        if i < j or (i == j and side == "born"):
            return float(self.born(i, j))
        if i - j >= self.n_ages - j:
            return 0.0
        return float(self.initial(i - j, j))

    def grid(self, t: float, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Ages and ``X1`` values on every ``stride``-th node of the support at time ``t``."""
        j = self.time_index(t)
        idx = np.arange(0, j + self.init_support, stride)
        out = np.empty(idx.size)
        born = idx <= j
        out[born] = self.born(idx[born], j)
        out[~born] = self.initial(idx[~born] - j, j)
        return self.h * idx, out

    def window_integral(self, lo: float, hi: float, t: float) -> float:
        """``int_lo^hi X1(a; t) da`` with each side of the seam integrated separately."""
        j, k_lo, k_hi = _window_nodes(self, lo, hi, t)
        total = 0.0
        b_hi = min(k_hi, j)
        if b_hi > k_lo:
            idx = np.arange(k_lo, b_hi + 1)
            total += float(trapezoid_weights(idx.size, self.h) @ self.born(idx, j))
        i_lo = max(k_lo, j)
        if k_hi > i_lo:
            idx = np.arange(i_lo, k_hi + 1)
            total += float(trapezoid_weights(idx.size, self.h) @ self.initial(idx - j, j))
        return total


def _window_nodes(x1: MomentField1, lo: float, hi: float, t: float) -> tuple[int, int, int]:
    if not 0 <= lo <= hi:
        raise DomainError("window needs 0 <= lo <= hi")
    j = x1.time_index(t)
    k_lo = _node(lo, x1.h, "window edge")
    last = x1.n_ages - 1
    k_hi = last if math.isinf(hi) else _node(hi, x1.h, "window edge")
    if k_hi > last:
        raise DomainError(f"window edge {hi} beyond the age grid ({last * x1.h})")
    return j, k_lo, min(k_hi, last)


def solve_factorial_moment_k1(init: GridFunction, beta: AgeRate, mu: AgeRate, horizon: float) -> MomentField1:
    """First factorial moment (mean age density); identical to the MvF solve."""
    return MomentField1(solve_mvf(init, beta, mu, horizon))


# second moment -----------------------------------------------------------------


@dataclass(eq=False)
class MomentField2:
    """Second factorial moment ``X2(a, b; t)`` stored through its edge function.

    Attributes
    ----------
    edge_born : ndarray, shape (n_times, n_times)
        ``edge_born[j, i] = E(i*h, j*h)`` for ``i <= j``; ``i == j`` is the born-side seam.
    edge_init : ndarray, shape (n_times, n_init)
        ``edge_init[j, d] = E((j + d)*h, j*h)``; ``d == 0`` is the founder-side seam.
    """

    x1: MomentField1
    edge_born: np.ndarray = field(repr=False)
    edge_init: np.ndarray = field(repr=False)
    init2: np.ndarray = field(repr=False)
    k: int = 2

    @property
    def h(self) -> float:
        return self.x1.h

    @property
    def n_times(self) -> int:
        return self.edge_born.shape[0]

    @property
    def horizon(self) -> float:
        return self.h * (self.n_times - 1)

    @property
    def cum_mu(self) -> np.ndarray:
        return self.x1.cum_mu

    def time_index(self, t: float) -> int:
        j = _node(t, self.h, "time")
        if not 0 <= j < self.n_times:
            raise DomainError(f"time {t} outside [0, {self.horizon}]")
        return j

    def edge(self, a: float, t: float, side: str = "born") -> float:
        """Boundary value ``X2(a, 0; t)``; ``side`` picks the limit on the seam ``a = t``."""
        j = self.time_index(t)
        i = _node(a, self.h, "age")
        if i < j or (i == j and side == "born"):
            return float(self.edge_born[j, i])
        d = i - j
        return float(self.edge_init[j, d]) if d < self.edge_init.shape[1] else 0.0

    def unordered_boundary(self, a: float, t: float, side: str = "born") -> float:
        """Half the edge value: the newborn flux counted over unordered pairs."""
        return 0.5 * self.edge(a, t, side)

    def _U(self, lo, hi) -> np.ndarray:
        return np.exp(-(self.cum_mu[hi] - self.cum_mu[lo]))

    def _x2_indices(self, k: np.ndarray, l: np.ndarray, j: int, side_k: str, side_l: str) -> np.ndarray:
        """``X2`` at age indices ``(k, l)`` at time index ``j``; sides matter only on the seam."""
        k, l = np.broadcast_arrays(np.asarray(k), np.asarray(l))
        swap = l < k
        lo = np.where(swap, l, k)
        hi = np.where(swap, k, l)
        lo_born = np.where(swap, side_l == "born", side_k == "born")
        hi_born = np.where(swap, side_k == "born", side_l == "born")
        out = np.zeros(lo.shape)
        younger_born = (lo < j) | ((lo == j) & lo_born)
        # smaller age born after time 0: trace back to the edge
        c = hi - lo
        tau = j - lo
        born_region = younger_born & ((hi < j) | ((hi == j) & hi_born))
        m = born_region
        out[m] = self.edge_born[tau[m], c[m]] * self._U(0, lo[m]) * self._U(c[m], hi[m])
        m = younger_born & ~born_region
        d = hi - j
        ok = m & (d < self.edge_init.shape[1])
        out[ok] = self.edge_init[tau[ok], d[ok]] * self._U(0, lo[ok]) * self._U(c[ok], hi[ok])
        # both ages carry founders: propagate the initial correlation
        m = ~younger_born
        n0 = self.init2.shape[0]
        a0, b0 = lo - j, hi - j
        ok = m & (b0 < n0)
        if np.any(ok) and self.init2.any():
            out[ok] = self.init2[a0[ok], b0[ok]] * self._U(a0[ok], lo[ok]) * self._U(b0[ok], hi[ok])
        return out

    def value(self, a: float, b: float, t: float, side_a: str = "born", side_b: str = "born") -> float:
        """``X2(a, b; t)`` at grid nodes, symmetric in its age arguments."""
        j = self.time_index(t)
        ka = _node(a, self.h, "age")
        kb = _node(b, self.h, "age")
        v = float(self._x2_indices(np.array([ka]), np.array([kb]), j, side_a, side_b)[0])
        w = float(self._x2_indices(np.array([kb]), np.array([ka]), j, side_b, side_a)[0])
        assert v == w, "X2 must be symmetric by construction"
        return v

    def grid(self, t: float, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Ages and the symmetric matrix of ``X2`` values on every ``stride``-th support node."""
        j = self.time_index(t)
        idx = np.arange(0, j + self.x1.init_support, stride)
        kk, ll = np.meshgrid(idx, idx, indexing="ij")
        return self.h * idx, self._x2_indices(kk, ll, j, "born", "born")

    def window_pair_integral(self, lo: float, hi: float, t: float) -> float:
        """``int int_{[lo,hi]^2} X2(a, b; t) da db`` split at the seam on both axes."""
        j, k_lo, k_hi = _window_nodes(self.x1, lo, hi, t)
        if k_hi <= k_lo:
            return 0.0
        h = self.h
        pieces = []
        b_hi = min(k_hi, j)
        if b_hi > k_lo:
            pieces.append(("born", np.arange(k_lo, b_hi + 1)))
        i_lo = max(k_lo, j)
        if k_hi > i_lo:
            pieces.append(("init", np.arange(i_lo, k_hi + 1)))
        total = 0.0
        for p, (side_p, idx_p) in enumerate(pieces):
            wp = trapezoid_weights(idx_p.size, h)
            for q, (side_q, idx_q) in enumerate(pieces):
                if q < p or (side_p == side_q == "init" and not self.init2.any()):
                    continue
                wq = trapezoid_weights(idx_q.size, h)
                acc = 0.0
                # row-by-row keeps memory linear in the window length
                for r, kk in enumerate(idx_p):
                    vals = self._x2_indices(np.full(idx_q.size, kk), idx_q, j, side_p, side_q)
                    acc += wp[r] * float(wq @ vals)
                total += acc if p == q else 2.0 * acc
        return total


def _initial_pairs(init2, h: float, size: int) -> np.ndarray:
    out = np.zeros((size, size))
    if init2 is None:
        return out
    if isinstance(init2, GridFunction2D):
        if abs(init2.da - h) > 1e-12 * h or abs(init2.dt - h) > 1e-12 * h or init2.a0 != 0 or init2.t0 != 0:
            raise ConfigurationError("initial pair density must live on the first-moment grid")
        vals = init2.values
    else:
        vals = np.asarray(init2, dtype=float)
    if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
        raise ConfigurationError("initial pair density must be a square array")
    if not np.allclose(vals, vals.T, rtol=0, atol=0):
        raise ConfigurationError("initial pair density must be symmetric")
    if np.any(vals < 0):
        raise DomainError("initial pair density must be nonnegative")
    n = min(size, vals.shape[0])
    if np.any(vals[n:]) or np.any(vals[:, n:]):
        raise ConfigurationError("initial pair density extends beyond the initial age support")
    out[:n, :n] = vals[:n, :n]
    return out


def solve_factorial_moment_k2(
    x1: MomentField1,
    beta: AgeRate,
    mu: AgeRate,
    init2=None,
    horizon: float | None = None,
    method: str = "auto",
) -> MomentField2:
    """Solve for the second factorial moment by marching its edge function in time.

    Parameters
    ----------
    x1 : MomentField1
        First moment on the grid that fixes ``da = dt = h``.
    beta, mu : AgeRate
        Must be the rates used for ``x1``.
    init2 : GridFunction2D or ndarray, optional
        Initial pair density ``X2(a, b; 0)`` on the same age grid; zero by default
        (a single founder).
    horizon : float, optional
        Defaults to the horizon of ``x1``.
    method : {"auto", "constant", "general"}
        ``"constant"`` uses diagonal recursions (cost O(N^2)) and needs constant
        rates; ``"general"`` sums directly (cost O(N^3), coarse grids only).

    Raises
    ------
    ConfigurationError
        For mismatched grids or rates, or the constant method with non-constant rates.
    """
    _require_mean_field_rates(beta, mu)
    if beta is not x1.sol.beta or mu is not x1.sol.mu:
        same = (beta.kind, beta.params, mu.kind, mu.params) == (
            x1.sol.beta.kind, x1.sol.beta.params, x1.sol.mu.kind, x1.sol.mu.params)
        if not same or beta.kind == "tabulated" or mu.kind == "tabulated":
            raise ConfigurationError("rates differ from those of the first-moment solution")
    h = x1.h
    horizon = x1.horizon if horizon is None else horizon
    nt = steps_for(horizon, h) + 1
    if nt > x1.n_times:
        raise ConfigurationError("second-moment horizon exceeds the first-moment horizon")
    nd = x1.init_support
    X20 = _initial_pairs(init2, h, nd)
    constant = beta.is_constant and mu.is_constant
    if method == "auto":
        method = "constant" if constant else "general"
    if method == "constant" and not constant:
        raise ConfigurationError("the constant-rate method needs constant beta and mu")
    if method == "constant":
        eb, ei = _march_constant(x1, float(beta.params[0]), float(mu.params[0]), X20, nt, nd)
    elif method == "general":
        eb, ei = _march_general(x1, beta, X20, nt, nd)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    return MomentField2(x1, eb, ei, X20)


def _march_constant(x1: MomentField1, beta: float, mu: float, X20: np.ndarray, nt: int, nd: int):
    h = x1.h
    xi = math.exp(-2.0 * mu * h)
    diag = 1.0 - 0.5 * beta * h
    wv = trapezoid_weights(nd, h) if nd > 1 else np.zeros(nd)
    R = X20 @ wv
    eb = np.zeros((nt, nt))
    ei = np.zeros((nt, nd))
    I = np.zeros(nt)
    edge0 = np.zeros(nt)

    ei[0] = beta * (x1.initial(np.arange(nd), 0) + R)
    I[0] = float(wv @ ei[0])
    eb[0, 0] = beta * (float(x1.born(0, 0)) + I[0])
    edge0[0] = eb[0, 0]
    p_init = ei[0].copy()
    p_born = np.array([eb[0, 0]])
    d = np.arange(nd)
    for j in range(1, nt):
        tau = j * h
        e2 = math.exp(-2.0 * mu * tau)
        ei[j] = (beta * x1.initial(d, j) + beta * h * (xi * p_init - 0.5 * xi**j * ei[0]) + beta * e2 * R) / diag
        p_init = ei[j] + xi * p_init

        i = np.arange(1, j + 1)
        eb[j, 1:j + 1] = (
            beta * x1.born(i, j)
            + beta * h * (xi * p_born[i - 1] - 0.5 * xi**i * edge0[j - i])
            + beta * np.exp(-2.0 * mu * h * i) * I[j - i]
        ) / diag
        rest = h * (eb[j, 1:j].sum() + 0.5 * eb[j, j]) + float(wv @ ei[j])
        eb[j, 0] = (beta * float(x1.born(0, j)) + beta * rest) / diag
        I[j] = rest + 0.5 * h * eb[j, 0]
        edge0[j] = eb[j, 0]
        nxt = eb[j, : j + 1].copy()
        nxt[1:] += xi * p_born
        p_born = nxt
    return eb, ei


def _march_general(x1: MomentField1, beta: AgeRate, X20: np.ndarray, nt: int, nd: int):
    h = x1.h
    na = nd + nt
    ages = h * np.arange(na)
    ba = beta.base(ages)
    cm = np.concatenate([x1.cum_mu, np.full(max(0, na - x1.cum_mu.size), x1.cum_mu[-1])])[:na]
    if x1.cum_mu.size < na:
        cm[x1.cum_mu.size:] = x1.sol.mu.cumulative(ages[x1.cum_mu.size:])
    diag = 1.0 - 0.5 * h * ba[0]
    wv = trapezoid_weights(nd, h) if nd > 1 else np.zeros(nd)
    eb = np.zeros((nt, nt))
    ei = np.zeros((nt, nd))
    d = np.arange(nd)
    births = ba[:nt] * np.exp(-cm[:nt])  # beta(y) U(0, y)

    def source_init(j):
        # founder pairs reaching (c, 0): U(d, d+j) * int beta(v+j) X20(d, v) U(v, v+j) dv
        if not X20.any():
            return np.zeros(nd)
        vec = wv * ba[d + j] * np.exp(-(cm[d + j] - cm[d]))
        return np.exp(-(cm[d + j] - cm[d])) * (X20 @ vec)

    ei[0] = ba[:nd] * x1.initial(d, 0) + source_init(0)
    eb[0, 0] = ba[0] * float(x1.born(0, 0)) + float(wv @ (ba[:nd] * ei[0]))
    for j in range(1, nt):
        c_abs = d + j
        acc = np.zeros(nd)
        for l in range(1, j + 1):
            w = h * (0.5 if l == j else 1.0)
            acc += w * births[l] * np.exp(-(cm[c_abs] - cm[c_abs - l])) * ei[j - l]
        ei[j] = (ba[c_abs] * x1.initial(d, j) + acc + source_init(j)) / diag

        for i in range(1, j + 1):
            a_term = 0.0
            for l in range(1, i + 1):
                w = h * (0.5 if l == i else 1.0)
                a_term += w * births[l] * math.exp(-(cm[i] - cm[i - l])) * eb[j - l, i - l]
            tp = j - i
            u_b = np.arange(tp + 1)
            c_born = 0.0
            if tp > 0:
                c_born = float(trapezoid_weights(tp + 1, h) @ (
                    ba[i + u_b] * np.exp(-(cm[i + u_b] - cm[u_b])) * eb[tp, u_b]))
            u_i = tp + d
            c_init = float(wv @ (ba[i + u_i] * np.exp(-(cm[i + u_i] - cm[u_i])) * ei[tp]))
            c_term = math.exp(-cm[i]) * (c_born + c_init)
            eb[j, i] = (ba[i] * float(x1.born(i, j)) + a_term + c_term) / diag

        u_b = np.arange(1, j + 1)
        wb = trapezoid_weights(j + 1, h)[1:]
        rest = float(wb @ (ba[u_b] * eb[j, 1:j + 1])) + float(wv @ (ba[j + d] * ei[j]))
        eb[j, 0] = (ba[0] * float(x1.born(0, j)) + rest) / diag
    return eb, ei


# closed forms and window statistics ----------------------------------------------


def yule_furry_closed(lam: float, beta: float, a: float, b: float, t: float):
    """Closed forms for a pure-birth process from one founder with age density ``lam e^{-lam a}``.

    Returns
    -------
    X1 : float
        Mean density at age ``a``.
    X2 : float
        Pair density at ages ``(a, b)`` (zero when ``b`` is infinite).
    E, Var : float
        Mean and variance of the number of individuals with age in ``[a, b]``.

    Raises
    ------
    DomainError
        Unless ``0 <= a < b``.
    """
    if not 0 <= a < b:
        raise DomainError("window needs 0 <= a < b")
    exp = math.exp
    X1 = lam * exp(-lam * (a - t)) if t < a else beta * exp(beta * (t - a))
    if math.isinf(b) or t < a:
        X2 = 0.0
    elif b > t:
        X2 = lam * beta * exp(-lam * (b - a)) * exp((lam + beta) * (t - a))
    else:
        X2 = 2.0 * beta**2 * exp(-beta * (b - a)) * exp(2.0 * beta * (t - a))
    # exp(-inf) = 0 covers the open window b = inf
    if t <= a:
        E = exp(lam * t) * (exp(-lam * a) - exp(-lam * b))
        Var = exp(2 * lam * t) * (exp(-lam * a) - exp(-lam * b)) * (
            -exp(-lam * a) + exp(-lam * b) + exp(-lam * t))
    elif t < b:
        tail = exp(lam * (t - b))
        E = exp(beta * (t - a)) - tail
        Var = (exp(beta * (t - a)) - tail) * (exp(beta * (t - a)) + tail - 1.0)
    else:
        E = exp(beta * (t - a)) - exp(beta * (t - b))
        Var = exp(2 * beta * t) * (exp(-beta * a) - exp(-beta * b)) * (
            exp(-beta * a) - exp(-beta * b) + exp(-beta * t))
    return X1, X2, E, Var


def window_mean_var(x1: MomentField1, x2: MomentField2 | None, window: tuple[float, float], t: float):
    """Mean and variance of the number of individuals with age in ``window`` at time ``t``.

    ``Var = int int X2 + int X1 - (int X1)**2``: the raw second moment
    ``E[N**2] = E[N(N-1)] + E[N]`` taken at the window-integrated level.
    ``x2 = None`` means ``X2 = 0``.
    """
    lo, hi = window
    mean = x1.window_integral(lo, hi, t)
    pairs = 0.0 if x2 is None else x2.window_pair_integral(lo, hi, t)
    raw2 = stirling_convert(StirlingTable(2), [mean, pairs], to="raw")[1]
    return mean, raw2 - mean * mean
