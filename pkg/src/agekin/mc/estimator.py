"""Ensemble estimators for the marginal densities and window counts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError
from .engine import Snapshot

__all__ = ["EnsembleEstimator", "WindowStats", "window_count_stats"]


@dataclass
class _TimeSlot:
    n_counts: dict[int, int] = field(default_factory=dict)
    age_sums: dict[int, np.ndarray] = field(default_factory=dict)
    pair_sum: np.ndarray | None = None
    overflow: float = 0.0
    totals: list[int] = field(default_factory=list)
    singles: list[int] = field(default_factory=list)
    doublets: list[int] = field(default_factory=list)
    window_counts: list[list[int]] = field(default_factory=list)
    charts: list[np.ndarray] = field(default_factory=list)


@dataclass
class EnsembleEstimator:
    """Per-output-time accumulators over independent paths.

    Densities are normalized on query: ``age_density(t, n)`` estimates the
    one-point marginal of the size-``n`` sector (each individual weighted by
    ``1/n``) and ``pair_density(t)`` the two-point marginal summed over ``n``
    (each ordered pair weighted by ``1/(n(n-1))``).
    """

    times: tuple[float, ...]
    bin_edges: np.ndarray
    windows: tuple[tuple[float, float], ...] = ()
    keep_charts: bool = True
    paths: int = 0
    slots: list[_TimeSlot] = field(default_factory=list)

    def __post_init__(self):
        if not self.slots:
            self.slots = [_TimeSlot(window_counts=[[] for _ in self.windows]) for _ in self.times]

    @classmethod
    def for_config(cls, config) -> "EnsembleEstimator":
        return cls(tuple(config.output_times), config.bin_edges, tuple(config.windows), config.keep_charts)

    @property
    def n_bins(self) -> int:
        return self.bin_edges.size - 1

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def time_index(self, t: float) -> int:
        for i, s in enumerate(self.times):
            if abs(s - t) <= 1e-9 * max(1.0, abs(t)):
                return i
        raise DomainError(f"t={t} is not an output time {self.times}")

    # accumulation -----------------------------------------------------------
    def _bin_counts(self, ages: np.ndarray) -> tuple[np.ndarray, int]:
        idx = np.floor(ages / self.bin_width).astype(np.int64)
        inside = idx < self.n_bins
        return np.bincount(idx[inside], minlength=self.n_bins).astype(float), int(ages.size - inside.sum())

    def add_path(self, snaps: list[Snapshot]) -> None:
        if len(snaps) != len(self.times):
            raise DomainError("one snapshot per output time is required")
        self.paths += 1
        for slot, snap in zip(self.slots, snaps):
            ages = snap.ages
            n = int(ages.size)
            slot.n_counts[n] = slot.n_counts.get(n, 0) + 1
            slot.totals.append(n)
            slot.singles.append(snap.singles)
            slot.doublets.append(snap.doublets)
            for w, (lo, hi) in enumerate(self.windows):
                slot.window_counts[w].append(int(np.count_nonzero((ages >= lo) & (ages < hi))))
            if self.keep_charts:
                slot.charts.append(ages)
            if n == 0:
                continue
            c, over = self._bin_counts(ages)
            slot.overflow += over / n
            if n in slot.age_sums:
                slot.age_sums[n] += c / n
            else:
                slot.age_sums[n] = c / n
            if n >= 2:
                if slot.pair_sum is None:
                    slot.pair_sum = np.zeros((self.n_bins, self.n_bins))
                nz = np.flatnonzero(c)
                cz = c[nz]
                block = np.outer(cz, cz)
                block[np.diag_indices_from(block)] -= cz
                slot.pair_sum[np.ix_(nz, nz)] += block / (n * (n - 1))

    def merge(self, other: "EnsembleEstimator") -> "EnsembleEstimator":
        """Append ``other``'s paths after this estimator's (in place)."""
        if other.times != self.times or not np.array_equal(other.bin_edges, self.bin_edges):
            raise DomainError("estimators have different layouts")
        if other.windows != self.windows:
            raise DomainError("estimators track different windows")
        self.paths += other.paths
        for a, b in zip(self.slots, other.slots):
            for n, k in b.n_counts.items():
                a.n_counts[n] = a.n_counts.get(n, 0) + k
            for n, arr in b.age_sums.items():
                a.age_sums[n] = a.age_sums[n] + arr if n in a.age_sums else arr.copy()
            if b.pair_sum is not None:
                a.pair_sum = b.pair_sum.copy() if a.pair_sum is None else a.pair_sum + b.pair_sum
            a.overflow += b.overflow
            a.totals.extend(b.totals)
            a.singles.extend(b.singles)
            a.doublets.extend(b.doublets)
            for wa, wb in zip(a.window_counts, b.window_counts):
                wa.extend(wb)
            a.charts.extend(b.charts)
        return self

    # queries ------------------------------------------------------------------
    def n_marginal(self, t: float) -> dict[int, float]:
        """Estimated probability of each population size ``n``."""
        slot = self.slots[self.time_index(t)]
        if self.paths == 0:
            return {}
        return {n: k / self.paths for n, k in sorted(slot.n_counts.items())}

    def age_density(self, t: float, n: int) -> np.ndarray:
        slot = self.slots[self.time_index(t)]
        s = slot.age_sums.get(n)
        if s is None or self.paths == 0:
            return np.zeros(self.n_bins)
        return s / (self.paths * self.bin_width)

    def pair_density(self, t: float) -> np.ndarray:
        slot = self.slots[self.time_index(t)]
        if slot.pair_sum is None or self.paths == 0:
            return np.zeros((self.n_bins, self.n_bins))
        return slot.pair_sum / (self.paths * self.bin_width**2)

    def totals(self, t: float) -> np.ndarray:
        return np.asarray(self.slots[self.time_index(t)].totals, dtype=np.int64)

    def singlet_doublet_counts(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        slot = self.slots[self.time_index(t)]
        return np.asarray(slot.singles, dtype=np.int64), np.asarray(slot.doublets, dtype=np.int64)

    def overflow_mass(self, t: float) -> float:
        """Probability mass of the one-point densities beyond the last age bin."""
        return self.slots[self.time_index(t)].overflow / self.paths if self.paths else 0.0

    def window_counts(self, t: float, window: tuple[float, float]) -> np.ndarray:
        """Exact per-path counts with age in ``[lo, hi)``."""
        lo, hi = window
        if not 0 <= lo <= hi:
            raise DomainError(f"bad window {window}")
        slot = self.slots[self.time_index(t)]
        for w, (a, b) in enumerate(self.windows):
            if a == lo and b == hi:
                return np.asarray(slot.window_counts[w], dtype=np.int64)
        if not self.keep_charts:
            raise DomainError(f"window {window} was not tracked and charts were not kept")
        return np.array([int(np.count_nonzero((c >= lo) & (c < hi))) for c in slot.charts], dtype=np.int64)


@dataclass(frozen=True)
class WindowStats:
    """Sample mean and variance of a per-path count with their standard errors."""

    mean: float
    var: float
    se_mean: float
    se_var: float
    paths: int


def count_stats(x: np.ndarray) -> WindowStats:
    x = np.asarray(x, dtype=float)
    p = x.size
    if p == 0:
        return WindowStats(np.nan, np.nan, np.nan, np.nan, 0)
    mean = float(x.mean())
    if p < 2:
        return WindowStats(mean, np.nan, np.nan, np.nan, p)
    dev = x - mean
    var = float(dev @ dev / (p - 1))
    se_mean = float(np.sqrt(var / p))
    if p < 4:
        return WindowStats(mean, var, se_mean, np.nan, p)
    m4 = float(np.mean(dev**4))
    # large-sample variance of the unbiased sample variance
    v = (m4 - var * var * (p - 3) / (p - 1)) / p
    return WindowStats(mean, var, se_mean, float(np.sqrt(max(v, 0.0))), p)


def window_count_stats(estimator: EnsembleEstimator, window: tuple[float, float], t: float) -> WindowStats:
    """Statistics of the number of individuals with age in ``[lo, hi)`` at time ``t``."""
    return count_stats(estimator.window_counts(t, window))
