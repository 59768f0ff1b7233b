"""Ensemble driver: fixed path chunks, per-path streams, ordered merge."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .engine import FixedDtBlock, Snapshot, SpatialTerms, Thinner
from .estimator import EnsembleEstimator
from .state import SimConfig, block_rng, path_rng

__all__ = ["simulate_paths", "run_path", "run_block", "chunk_ranges", "resolve_workers"]


def resolve_workers(workers: int | None) -> int:
    """Explicit value, else ``AGEKIN_WORKERS``, else 1."""
    if workers is None:
        env = os.environ.get("AGEKIN_WORKERS")
        workers = int(env) if env else 1
    return max(1, int(workers))


def chunk_ranges(paths: int, size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + size, paths)) for lo in range(0, paths, size)]


def run_path(config: SimConfig, path: int) -> list[Snapshot]:
    """Simulate one path by thinning and observe it at every output time."""
    rng = path_rng(config.seed, path)
    state = config.initial.sample(rng, config.mode)
    th = Thinner(state, config.rates, config.majorant_window, rng)
    out = []
    for t in config.output_times:
        th.run_until(t)
        out.append(th.snapshot())
    return out


def run_block(
    config: SimConfig,
    block: int,
    lo: int,
    hi: int,
    spatial: SpatialTerms | None = None,
    initial_positions=None,
) -> list[list[Snapshot]]:
    """Simulate paths ``lo..hi-1`` together with the fixed-dt scheme.

    ``initial_positions(rng, size)`` samples founder positions in spatial runs.
    """
    rng = block_rng(config.seed, block)
    p = hi - lo
    pids, tobs, mults, poss = [], [], [], []
    for k in range(p):
        st = config.initial.sample(rng, config.mode)
        units = np.concatenate([st.singles, st.doublets])
        pids.append(np.full(units.size, k, dtype=np.int64))
        tobs.append(units)
        mults.append(np.concatenate([np.ones(st.m, np.int64), np.full(st.n_doublets, 2, np.int64)]))
        if initial_positions is not None:
            poss.append(np.asarray(initial_positions(rng, units.size), dtype=float))
    pos = np.concatenate(poss) if initial_positions is not None else None
    blk = FixedDtBlock(
        config.mode, config.rates, config.dt, rng,
        np.concatenate(pids) if pids else np.empty(0, np.int64),
        np.concatenate(tobs) if tobs else np.empty(0),
        np.concatenate(mults) if mults else np.empty(0, np.int64),
        p, 0.0, pos, spatial,
    )
    per_path: list[list[Snapshot]] = [[] for _ in range(p)]
    step = 0
    for t in config.output_times:
        target = int(round(t / config.dt))
        while step < target:
            blk.step()
            step += 1
        for k, snap in enumerate(blk.snapshots()):
            per_path[k].append(snap)
    return per_path


def _run_chunk(args) -> EnsembleEstimator:
    config, index, lo, hi = args
    est = EnsembleEstimator.for_config(config)
    if config.stepper == "thinning":
        for path in range(lo, hi):
            est.add_path(run_path(config, path))
    else:
        for snaps in run_block(config, index, lo, hi):
            est.add_path(snaps)
    return est


def simulate_paths(config: SimConfig, workers: int | None = None) -> EnsembleEstimator:
    """Run ``config.paths`` independent paths and fill an ensemble estimator.

    Paths are grouped into chunks of ``config.block_size`` regardless of the
    worker count, and chunk estimators are merged in chunk order, so the result
    is bit-identical for any number of workers.
    """
    result = EnsembleEstimator.for_config(config)
    chunks = chunk_ranges(config.paths, config.block_size)
    if not chunks:
        return result
    tasks = [(config, i, lo, hi) for i, (lo, hi) in enumerate(chunks)]
    n_workers = min(resolve_workers(workers), len(tasks))
    if n_workers == 1:
        parts = map(_run_chunk, tasks)
        for part in parts:
            result.merge(part)
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for part in pool.map(_run_chunk, tasks):
                result.merge(part)
    return result
