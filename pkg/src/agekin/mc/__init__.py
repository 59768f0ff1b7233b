"""Event-driven Monte Carlo over full age charts."""

from __future__ import annotations

from .engine import FixedDtBlock, Snapshot, SpatialTerms, Thinner, step_fixed, step_thinning
from .estimator import EnsembleEstimator, WindowStats, count_stats, window_count_stats
from .simulate import chunk_ranges, resolve_workers, run_block, run_path, simulate_paths
from .state import (
    RNG_ALGORITHM,
    AgeDistribution,
    InitialCondition,
    PopulationState,
    ProcessRates,
    SimConfig,
    block_rng,
    path_rng,
)

__all__ = [
    "AgeDistribution",
    "EnsembleEstimator",
    "FixedDtBlock",
    "InitialCondition",
    "PopulationState",
    "ProcessRates",
    "RNG_ALGORITHM",
    "SimConfig",
    "Snapshot",
    "SpatialTerms",
    "Thinner",
    "WindowStats",
    "block_rng",
    "chunk_ranges",
    "count_stats",
    "path_rng",
    "resolve_workers",
    "run_block",
    "run_path",
    "simulate_paths",
    "step_fixed",
    "step_thinning",
    "window_count_stats",
]
