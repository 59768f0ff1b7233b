"""Event steppers: exact thinning for single paths and a vectorized fixed-dt block scheme."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ConfigurationError, MajorantViolationError, NumericalWarning
from .state import PopulationState, ProcessRates

__all__ = ["Snapshot", "Thinner", "step_thinning", "step_fixed", "FixedDtBlock", "SpatialTerms"]

_MAJORANT_SLACK = 1e-12
_FIXED_DT_WARN = 0.1


@dataclass(frozen=True)
class Snapshot:
    """One path observed at one output time.

    ``ages`` lists every individual (doublets twice); ``positions`` is aligned
    with ``ages`` in spatial runs and ``None`` otherwise.
    """

    ages: np.ndarray
    singles: int
    doublets: int
    positions: np.ndarray | None = None

    @property
    def total(self) -> int:
        return int(self.ages.size)


def _capacity_sup(rate, n: int, t0: float, t1: float) -> float:
    if rate.capacity is None:
        return 1.0
    return float(rate.capacity.factor_sup(n, t0, t1))


class Thinner:
    """Exact event sampler for one path by thinning against windowed majorants.

    Units are singlets (multiplicity 1) or doublets (multiplicity 2). Over a
    window ``[t0, t_end]`` each unit's hazard is bounded by its supremum over
    the ages it will pass through; candidate times come from the superposed
    Poisson clock and are accepted with probability true rate / majorant.
    """

    def __init__(
        self,
        state: PopulationState,
        rates: ProcessRates,
        window: float,
        rng: np.random.Generator,
    ):
        if not window > 0:
            raise ConfigurationError("majorant window must be positive")
        self.state = state
        self.rates = rates
        self.window = window
        self.rng = rng
        self.memoryless = rates.memoryless_majorant
        if self.memoryless:
            self._b0 = rates.age_independent_value(rates.birth)
            self._d0 = rates.age_independent_value(rates.death)
        self.tob = np.concatenate([state.singles, state.doublets])
        self.mult = np.concatenate([np.ones(state.m, dtype=np.int64), np.full(state.n_doublets, 2, dtype=np.int64)])
        self.clock = state.clock
        self.window_end = -math.inf
        self.bsup = np.empty(0)
        self.dsup = np.empty(0)

    # bookkeeping ----------------------------------------------------------
    @property
    def n(self) -> int:
        return int(self.mult.sum())

    def _base_sups(self, tob: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo = self.clock - tob
        hi = self.window_end - tob
        b = self.rates.birth.with_capacity(None).sup(lo, hi)
        d = self.rates.death.with_capacity(None).sup(lo, hi)
        return np.asarray(b, dtype=float), np.asarray(d, dtype=float)

    def _refresh(self, t_stop: float) -> None:
        self.window_end = t_stop if self.memoryless else min(self.clock + self.window, t_stop)
        if math.isinf(self.window_end) and not self.memoryless:
            raise ConfigurationError("an unbounded window needs constant rates")
        if self.memoryless:
            b = np.full(self.tob.size, self._b0)
            d = np.full(self.tob.size, self._d0)
            self.bsup, self.dsup = b, d
        else:
            self.bsup, self.dsup = self._base_sups(self.tob)

    def _append(self, tob: float, mult: int) -> None:
        t = np.array([tob])
        if self.memoryless:
            b = np.array([self._b0])
            d = np.array([self._d0])
        else:
            b, d = self._base_sups(t)
        self.tob = np.append(self.tob, tob)
        self.mult = np.append(self.mult, mult)
        self.bsup = np.append(self.bsup, b)
        self.dsup = np.append(self.dsup, d)

    def _remove(self, k: int) -> None:
        self.tob = np.delete(self.tob, k)
        self.mult = np.delete(self.mult, k)
        self.bsup = np.delete(self.bsup, k)
        self.dsup = np.delete(self.dsup, k)

    def _apply(self, k: int, event: str) -> None:
        mode = self.state.mode
        m_before = int(np.count_nonzero(self.mult == 1))
        d_before = int(self.mult.size - m_before)
        if mode == "budding":
            if event == "birth":
                self._append(self.clock, 1)
            else:
                self._remove(k)
            return
        parent_mult = int(self.mult[k])
        parent_tob = float(self.tob[k])
        if event == "birth":
            self._remove(k)
            if parent_mult == 2:
                # the surviving twin becomes a singlet; the new pair is age zero
                self._append(parent_tob, 1)
            self._append(self.clock, 2)
            expected = (-1, 1) if parent_mult == 1 else (1, 0)
        else:
            self._remove(k)
            if parent_mult == 2:
                self._append(parent_tob, 1)
            expected = (-1, 0) if parent_mult == 1 else (1, -1)
        m_after = int(np.count_nonzero(self.mult == 1))
        d_after = int(self.mult.size - m_after)
        if (m_after - m_before, d_after - d_before) != expected:
            raise AssertionError("singlet/doublet bookkeeping broken")

    def sync(self) -> PopulationState:
        """Write the unit arrays back to the wrapped state."""
        s = self.state
        s.singles = self.tob[self.mult == 1].copy()
        s.doublets = self.tob[self.mult == 2].copy()
        s.clock = self.clock
        return s

    # sampling -------------------------------------------------------------
    def next_event(self, t_stop: float = math.inf) -> bool:
        """Advance to the next accepted event before ``t_stop``.

        Returns ``True`` if an event fired; otherwise the clock is left at
        ``t_stop`` (or unchanged when no event can ever occur).
        """
        birth, death = self.rates.birth, self.rates.death
        rng = self.rng
        while self.clock < t_stop:
            if self.clock >= self.window_end:
                self._refresh(t_stop)
            n = self.n
            fb = _capacity_sup(birth, n, self.clock, self.window_end)
            fd = _capacity_sup(death, n, self.clock, self.window_end)
            maj = self.mult * (self.bsup * fb + self.dsup * fd)
            cum = np.cumsum(maj)
            total = float(cum[-1]) if cum.size else 0.0
            if total <= 0.0:
                if math.isinf(self.window_end):
                    return False
                self.clock = self.window_end
                continue
            tau = rng.exponential() / total
            if self.clock + tau >= self.window_end:
                self.clock = self.window_end
                continue
            self.clock += tau
            k = min(int(np.searchsorted(cum, rng.random() * total, side="right")), cum.size - 1)
            age = self.clock - self.tob[k]
            if self.memoryless:
                b = self._b0 * _capacity_sup(birth, n, self.clock, self.clock) * self.mult[k]
                d = self._d0 * _capacity_sup(death, n, self.clock, self.clock) * self.mult[k]
            else:
                b = float(birth.eval(age, n, self.clock)) * self.mult[k]
                d = float(death.eval(age, n, self.clock)) * self.mult[k]
            if b + d > maj[k] * (1.0 + _MAJORANT_SLACK) + 1e-300:
                raise MajorantViolationError(
                    f"hazard {b + d:.6g} exceeds majorant {maj[k]:.6g} at age {age:.6g}"
                )
            u = rng.random() * maj[k]
            if u < b:
                self._apply(k, "birth")
                return True
            if u < b + d:
                self._apply(k, "death")
                return True
        self.clock = max(self.clock, t_stop) if not math.isinf(t_stop) else self.clock
        return False

    def run_until(self, t_stop: float) -> None:
        while self.next_event(t_stop):
            pass
        self.clock = t_stop

    def snapshot(self) -> Snapshot:
        ages = np.repeat(self.clock - self.tob, self.mult)
        m = int(np.count_nonzero(self.mult == 1))
        return Snapshot(ages, m, int(self.mult.size - m))


def step_thinning(
    state: PopulationState,
    rates: ProcessRates,
    window: float,
    rng: np.random.Generator,
    t_stop: float = math.inf,
) -> PopulationState:
    """Advance ``state`` through one accepted event (or to ``t_stop``) by thinning."""
    th = Thinner(state, rates, window, rng)
    th.next_event(t_stop)
    return th.sync()


# fixed-dt -------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialTerms:
    """Diffusion constant and position profiles multiplying the age hazards."""

    diffusion: float = 0.0
    birth_profile: Callable[[np.ndarray], np.ndarray] | None = None
    death_profile: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.diffusion < 0:
            raise ConfigurationError("diffusion constant must be nonnegative")


class FixedDtBlock:
    """Many independent paths advanced together in steps of ``dt``.

    Each step every unit fires at most once: with a single uniform ``u``,
    birth if ``u < b dt`` and death if ``b dt <= u < (b + d) dt``, using hazards
    at the start of the step. Events take effect at the end of the step, where
    newborns get ``TOB = clock`` and, in spatial runs, the parent's position.
    """

    def __init__(
        self,
        mode: str,
        rates: ProcessRates,
        dt: float,
        rng: np.random.Generator,
        pid: np.ndarray,
        tob: np.ndarray,
        mult: np.ndarray,
        n_paths: int,
        clock: float = 0.0,
        positions: np.ndarray | None = None,
        spatial: SpatialTerms | None = None,
    ):
        if not dt > 0:
            raise ConfigurationError("dt must be positive")
        self.mode = mode
        self.rates = rates
        self.dt = dt
        self.rng = rng
        self.pid = np.asarray(pid, dtype=np.int64)
        self.tob = np.asarray(tob, dtype=float)
        self.mult = np.asarray(mult, dtype=np.int64)
        self.n_paths = n_paths
        self.clock = clock
        self._t0 = clock
        self._k = 0
        self.spatial = spatial
        self.pos = None if positions is None and spatial is None else np.asarray(
            positions if positions is not None else np.zeros(self.tob.size), dtype=float
        )
        self._warned = False

    def _hazards(self) -> tuple[np.ndarray, np.ndarray]:
        counts = np.bincount(self.pid, weights=self.mult, minlength=self.n_paths)
        n_unit = counts[self.pid]
        ages = self.clock - self.tob
        b = self.rates.birth.eval(ages, n_unit, self.clock)
        d = self.rates.death.eval(ages, n_unit, self.clock)
        if self.spatial is not None:
            if self.spatial.birth_profile is not None:
                b = b * self.spatial.birth_profile(self.pos)
            if self.spatial.death_profile is not None:
                d = d * self.spatial.death_profile(self.pos)
        return b * self.mult, d * self.mult

    def step(self) -> None:
        dt = self.dt
        nunits = self.tob.size
        if nunits:
            b, d = self._hazards()
            pb, pt = b * dt, (b + d) * dt
            if not self._warned and pt.size and pt.max() > _FIXED_DT_WARN:
                warnings.warn(
                    f"per-step event probability {pt.max():.3g} exceeds {_FIXED_DT_WARN}; reduce dt",
                    NumericalWarning,
                    stacklevel=2,
                )
                self._warned = True
            u = self.rng.random(nunits)
            born = u < pb
            dies = ~born & (u < pt)
        if self.pos is not None and self.spatial is not None and self.spatial.diffusion > 0 and nunits:
            self.pos = self.pos + math.sqrt(2.0 * self.spatial.diffusion * dt) * self.rng.standard_normal(nunits)
        self._k += 1
        self.clock = self._t0 + self._k * dt  # no drift from repeated addition
        if nunits:
            self._apply(born, dies)

    def _apply(self, born: np.ndarray, dies: np.ndarray) -> None:
        keep = ~(born | dies)
        new_pid, new_tob, new_mult, new_pos = [self.pid[keep]], [self.tob[keep]], [self.mult[keep]], []
        if self.pos is not None:
            new_pos.append(self.pos[keep])
        now = self.clock
        single = self.mult == 1

        def add(mask, tob, mult):
            new_pid.append(self.pid[mask])
            new_tob.append(np.full(int(mask.sum()), now) if tob is None else self.tob[mask])
            new_mult.append(np.full(int(mask.sum()), mult, dtype=np.int64))
            if self.pos is not None:
                new_pos.append(self.pos[mask])

        if self.mode == "budding":
            add(born, "parent", 1)  # parent survives
            add(born, None, 1)  # newborn at the parent's position
        else:
            add(born & ~single, "parent", 1)  # surviving twin of a split doublet
            add(born, None, 2)  # fresh twin pair
            add(dies & ~single, "parent", 1)  # surviving twin of a doublet death
        self.pid = np.concatenate(new_pid)
        self.tob = np.concatenate(new_tob)
        self.mult = np.concatenate(new_mult)
        if self.pos is not None:
            self.pos = np.concatenate(new_pos)

    def snapshots(self) -> list[Snapshot]:
        """Per-path snapshots at the current clock, units in storage order."""
        order = np.argsort(self.pid, kind="stable")
        pid = self.pid[order]
        bounds = np.searchsorted(pid, np.arange(self.n_paths + 1))
        ages_all = self.clock - self.tob[order]
        mult = self.mult[order]
        pos = None if self.pos is None else self.pos[order]
        out = []
        for p in range(self.n_paths):
            s = slice(bounds[p], bounds[p + 1])
            mm = mult[s]
            ages = np.repeat(ages_all[s], mm)
            m = int(np.count_nonzero(mm == 1))
            q = None if pos is None else np.repeat(pos[s], mm)
            out.append(Snapshot(ages, m, int(mm.size - m), q))
        return out


def step_fixed(
    state: PopulationState,
    rates: ProcessRates,
    dt: float,
    rng: np.random.Generator,
) -> PopulationState:
    """Advance one path by ``dt`` with at most one event per unit."""
    tob = np.concatenate([state.singles, state.doublets])
    mult = np.concatenate([np.ones(state.m, dtype=np.int64), np.full(state.n_doublets, 2, dtype=np.int64)])
    blk = FixedDtBlock(state.mode, rates, dt, rng, np.zeros(tob.size, dtype=np.int64), tob, mult, 1, state.clock)
    blk.step()
    state.singles = blk.tob[blk.mult == 1].copy()
    state.doublets = blk.tob[blk.mult == 2].copy()
    state.clock = blk.clock
    return state
