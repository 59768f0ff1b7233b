"""Gamma-distributed cell division: contour-integral closed forms and a Laplace-inversion oracle.

With unit-mean Gamma cycle times of shape ``alpha`` and certain fission, the
newborn flux and the mean population size have transforms

    B~(s) = g~/(1 - 2 g~),     T~(s) = (1 - g~)/(s (1 - 2 g~)),     g~ = (alpha/(alpha+s))**alpha.

In the scaled variable ``s = alpha (z - 1)`` the singularities are the poles
``z**alpha = 2`` and, for non-integer ``alpha``, a branch cut along ``z <= 0``.
Closing the Bromwich contour around them gives a residue sum plus a real
integral along the cut.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal

import mpmath as mp
import numpy as np
from scipy import integrate

from .errors import ConvergenceError, DomainError, NumericalWarning
from .rates import GammaBranching

__all__ = [
    "BromwichResult",
    "InversionResult",
    "pole_locations",
    "bromwich_B",
    "bromwich_T",
    "B_closed_form",
    "T_closed_form",
    "numerical_laplace_inverse",
    "gamma_transform",
    "B_transform",
    "T_transform",
    "inversion_abscissa",
    "reference_growth",
    "age_time_distribution",
    "growth_exponent",
]

_TAIL_BOUND = 1e-12


def _is_integer(alpha: float) -> bool:
    return float(alpha).is_integer()


def pole_locations(alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Scaled poles ``z = 2**(1/alpha) exp(2 pi i n/alpha)`` on the principal sheet.

    Returns the integer labels ``n`` and the poles. Non-integer ``alpha`` keeps
    ``|n| <= floor(alpha/2)``; integer ``alpha`` keeps all ``alpha`` roots of 2,
    taking ``n = alpha/2`` (angle pi) once for even ``alpha``.
    """
    if _is_integer(alpha):
        k = int(alpha)
        lo = -(k // 2) + (1 if k % 2 == 0 else 0)
        ns = np.arange(lo, k // 2 + 1)
    else:
        m = int(math.floor(alpha / 2.0))
        ns = np.arange(-m, m + 1)
    return ns, 2.0 ** (1.0 / alpha) * np.exp(2j * np.pi * ns / alpha)


@dataclass(frozen=True)
class BromwichResult:
    """A closed-form value split into its branch-cut and residue parts.

    ``total == branch + residues`` exactly; both parts already carry the
    common prefactor. ``residue_imag`` is the imaginary part left in the
    residue sum, zero up to rounding by conjugate pairing.
    """

    branch: float
    residues: float
    total: float
    pole_labels: tuple[int, ...] = field(default=())
    pole_angles: tuple[float, ...] = field(default=())
    quad_error: float = 0.0
    residue_imag: float = 0.0


def _cut_denominator(r, alpha):
    # (r^a - 2 cos)^2 + 4 sin^2 avoids cancellation near the resonance
    d = r**alpha - 2.0 * math.cos(math.pi * alpha)
    return d * d + 4.0 * math.sin(math.pi * alpha) ** 2


def _branch_integral(alpha: float, tau: float, with_pole_at_minus_one: bool) -> tuple[float, float]:
    """``int_0^inf e^{-tau (r+1)} r^alpha sin(pi alpha) / D(r) [/(r+1)] dr``."""
    sa = math.sin(math.pi * alpha)
    c = math.cos(math.pi * alpha)

    def h(r):
        val = math.exp(-tau * (r + 1.0)) * r**alpha
        return val / (r + 1.0) if with_pole_at_minus_one else val

    def f(r):
        return 0.0 if r == 0.0 else h(r) * sa / _cut_denominator(r, alpha)

    # integrand <= e^{-tau(r+1)} r^-alpha for r^alpha >= 4, so the tail past r_max is tiny
    r_max = max(8.0, 4.0 ** (1.0 / alpha)) + (-math.log(_TAIL_BOUND) / tau if tau > 0 else 1e6)
    points = [1.0]
    peak = 0.0
    integrand = f
    if c > 0:
        # alpha near an even integer: D = (r^alpha - 2c)^2 + 4 sa^2 makes a Lorentzian
        # spike in u = r^alpha; subtract it in closed form and integrate the remainder
        u0 = 2.0 * c
        r0 = u0 ** (1.0 / alpha)
        if r0 < r_max and alpha >= 1.0:
            H0 = h(r0) / (alpha * r0 ** (alpha - 1.0))
            w = 2.0 * abs(sa)
            peak = H0 * math.copysign(0.5, sa) * (
                math.atan((r_max**alpha - u0) / w) + math.atan(u0 / w))

            def integrand(r):
                if r == 0.0:
                    return 0.0
                lor = H0 * alpha * r ** (alpha - 1.0) * sa / _cut_denominator(r, alpha)
                return f(r) - lor

        points.append(r0)
        # the remainder is odd about r0 on the scale of the spike width; bracket it
        d = r0 * abs(sa)
        while d < 0.5 * r0:
            points.extend((r0 - d, r0 + d))
            d *= 10.0
    points = sorted(p for p in set(points) if 0 < p < r_max)
    with warnings.catch_warnings():
        # convergence is judged from the returned error estimate below
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = _quad_cut(integrand, alpha, r_max, points)
    return val + peak, err


def _check_cut(branch: float, err: float, total: float) -> None:
    # judged against the full value: the cut part alone can be a near-cancelling sliver
    if not np.isfinite(branch) or err > 1e-10 * max(abs(total), 1e-300) and err > 1e-14:
        raise ConvergenceError("branch-cut quadrature did not converge", estimate=branch, error=err)


def _quad_cut(f, alpha: float, r_max: float, points: list[float]) -> tuple[float, float]:
    if alpha < 1.0:
        # u = log r tames the r**alpha cusp at the origin
        g = lambda u: f(math.exp(u)) * math.exp(u)  # noqa: E731
        val, err = integrate.quad(
            g, -60.0, math.log(r_max), points=[math.log(p) for p in points],
            epsabs=0.0, epsrel=1e-13, limit=1000,
        )
    else:
        val, err = integrate.quad(f, 0.0, r_max, points=points, epsabs=0.0, epsrel=1e-13, limit=1000)
    return val, err


def _residues(alpha: float, tau: float, kind: str) -> tuple[complex, np.ndarray, np.ndarray]:
    ns, p = pole_locations(alpha)
    growth = np.exp((p - 1.0) * tau)
    if kind == "B":
        terms = p / (2.0 * alpha) * growth
    else:
        terms = p / (2.0 * alpha * (p - 1.0)) * growth
    return complex(terms.sum()), ns, np.angle(p)


def bromwich_B(alpha: float, t: float) -> BromwichResult:
    """Newborn flux ``B(t)`` split into branch and residue contributions."""
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    if t < 0:
        raise DomainError("t must be nonnegative")
    tau = alpha * t
    res, ns, ang = _residues(alpha, tau, "B")
    br, err = 0.0, 0.0
    if not _is_integer(alpha):
        val, err = _branch_integral(alpha, tau, with_pole_at_minus_one=False)
        br = alpha * val / math.pi
        err = alpha * err / math.pi
    residues = alpha * res.real
    _check_cut(br, err, br + residues)
    return BromwichResult(
        branch=br,
        residues=residues,
        total=br + residues,
        pole_labels=tuple(int(n) for n in ns),
        pole_angles=tuple(float(a) for a in ang),
        quad_error=err,
        residue_imag=alpha * res.imag,
    )


def bromwich_T(alpha: float, t: float) -> BromwichResult:
    """Mean population ``T(t)`` split into branch and residue contributions.

    ``s = 0`` (scaled ``z = 1``) is a removable singularity, never a pole.
    """
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    if t < 0:
        raise DomainError("t must be nonnegative")
    tau = alpha * t
    res, ns, ang = _residues(alpha, tau, "T")
    br, err = 0.0, 0.0
    if not _is_integer(alpha):
        val, err = _branch_integral(alpha, tau, with_pole_at_minus_one=True)
        br = -val / math.pi
        err = err / math.pi
    _check_cut(br, err, br + res.real)
    return BromwichResult(
        branch=br,
        residues=res.real,
        total=br + res.real,
        pole_labels=tuple(int(n) for n in ns),
        pole_angles=tuple(float(a) for a in ang),
        quad_error=err,
        residue_imag=res.imag,
    )


def _vectorize(fn: Callable[[float, float], BromwichResult], alpha: float, t):
    arr = np.asarray(t, dtype=float)
    out = np.array([fn(alpha, float(x)).total for x in arr.ravel()]).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def B_closed_form(alpha: float, t):
    """Newborn flux ``B(t)`` of the Gamma fission model from one age-zero founder."""
    return _vectorize(bromwich_B, alpha, t)


def T_closed_form(alpha: float, t):
    """Mean population size ``T(t)`` of the Gamma fission model from one age-zero founder."""
    return _vectorize(bromwich_T, alpha, t)


def growth_exponent(alpha: float) -> float:
    """Malthusian rate ``alpha (2**(1/alpha) - 1)`` carried by the dominant pole."""
    return alpha * (2.0 ** (1.0 / alpha) - 1.0)


# numerical inversion oracle -------------------------------------------------------


@dataclass(frozen=True)
class InversionResult:
    """Inverse-Laplace value, the difference against half the node count, and a tolerance flag."""

    value: float
    error: float
    flagged: bool
    nodes: int

    def __float__(self) -> float:
        return self.value


def gamma_transform(alpha: float) -> Callable:
    """``s -> (alpha/(alpha+s))**alpha`` in mpmath arithmetic."""
    a = mp.mpf(alpha)
    return lambda s: (a / (a + s)) ** a


def B_transform(alpha: float) -> Callable:
    gt = gamma_transform(alpha)

    def F(s):
        g = gt(s)
        return g / (1 - 2 * g)

    return F


def T_transform(alpha: float) -> Callable:
    gt = gamma_transform(alpha)

    def F(s):
        g = gt(s)
        return (1 - g) / (s * (1 - 2 * g))

    return F


def inversion_abscissa(alpha: float, margin: float = 1.0) -> float:
    """Contour shift to the right of every singularity of ``B~`` and ``T~``."""
    return growth_exponent(alpha) + margin


def _talbot(F: Callable, t: float, nodes: int, shift: float):
    with mp.workdps(max(30, nodes + 10)):
        tt = mp.mpf(t)
        r = mp.mpf(2 * nodes) / (5 * tt)
        total = 0.5 * mp.exp(r * tt) * mp.re(F(r + shift))
        for k in range(1, nodes):
            theta = k * mp.pi / nodes
            cot = mp.cot(theta)
            s = r * theta * (cot + 1j)
            sigma = theta + (theta * cot - 1) * cot
            total += mp.re(mp.exp(s * tt) * (1 + 1j * sigma) * F(s + shift))
        return mp.exp(shift * tt) * r / nodes * total


def numerical_laplace_inverse(
    transform: Callable,
    t: float,
    nodes: int = 128,
    shift: float = 0.0,
    tol: float = 1e-8,
) -> InversionResult:
    """Invert a Laplace transform on a fixed Talbot contour.

    Parameters
    ----------
    transform : callable
        ``F(s)`` accepting mpmath complex arguments.
    t : float
        Positive evaluation time.
    nodes : int
        Contour node count; the error estimate compares against ``nodes // 2``.
    shift : float
        Abscissa shift; every singularity of ``F`` must lie left of it.
    tol : float
        Relative tolerance above which the result is flagged (with a warning).
    """
    if not t > 0:
        raise DomainError("inversion needs t > 0")
    if nodes < 8:
        raise DomainError("use at least 8 contour nodes")
    fine = _talbot(transform, t, nodes, shift)
    coarse = _talbot(transform, t, nodes // 2, shift)
    value = float(fine)
    err = float(abs(fine - coarse))
    flagged = err > tol * max(abs(value), 1e-300)
    if flagged:
        warnings.warn(
            f"Laplace inversion at t={t} has error estimate {err:.2e}", NumericalWarning, stacklevel=2
        )
    return InversionResult(value, err, flagged, nodes)


# reference laws -------------------------------------------------------------------


def reference_growth(kind: Literal["galton_watson", "markov"], t):
    """Discrete doubling ``2**floor(t)`` or Markovian growth ``e**t``."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise DomainError("t must be nonnegative")
    if kind == "galton_watson":
        out = np.power(2.0, np.floor(arr))
    elif kind == "markov":
        out = np.exp(arr)
    else:
        raise DomainError(f"unknown reference law {kind!r}")
    return float(out) if out.ndim == 0 else out


def age_time_distribution(alpha: float, x, t: float):
    """Mean density ``2 B(x) (1 - G(t - x))`` of individuals born at time ``x`` in ``(0, t]``."""
    xs = np.asarray(x, dtype=float)
    if np.any(xs <= 0) or np.any(xs > t):
        raise DomainError("birth time x must satisfy 0 < x <= t")
    dist = GammaBranching(alpha)
    out = 2.0 * np.asarray(B_closed_form(alpha, xs)) * dist.sf(t - xs)
    return float(out) if out.ndim == 0 else out
