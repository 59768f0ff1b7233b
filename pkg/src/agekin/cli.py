"""Command-line entry point: ``agekin <command> [options]``.

Exit codes: 0 success, 1 numerical failure or failed validation, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__, celldiv
from .config import load_mapping, parse_config
from .detsolve import solve_mvf
from .errors import AgekinError, ConfigurationError
from .fission_meanfield import bellman_harris_mean, solve_fission_B
from .mc import RNG_ALGORITHM, resolve_workers, simulate_paths, window_count_stats
from .moments import solve_factorial_moment_k1, solve_factorial_moment_k2, window_mean_var
from .spatial import simulate_spatial
from .validate import DEFAULT_SEED, CriterionResult, quick_suite, results_table, run_suite

__all__ = ["main", "run"]

log = logging.getLogger("agekin")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2
ENV_OUTPUT = "AGEKIN_OUTPUT_DIR"
ENV_WORKERS = "AGEKIN_WORKERS"


# output helpers -----------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


class OutputDir:
    """Collects CSV files and writes the run manifest last, atomically."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []
        root.mkdir(parents=True, exist_ok=True)

    def _atomic_write(self, name: str, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self.root / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        self._atomic_write(name, buf.getvalue().encode())
        self.files.append(name)

    def write_manifest(self, manifest: dict) -> None:
        entries = []
        for name in self.files:
            data = (self.root / name).read_bytes()
            entries.append({"name": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        manifest = dict(manifest, files=entries)
        text = json.dumps(_json_safe(manifest), indent=2, sort_keys=True) + "\n"
        self._atomic_write("manifest.json", text.encode())


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _manifest(command: str, spec, seed, extra: dict, started: float) -> dict:
    return {
        "agekin_manifest": True,
        "version": __version__,
        "command": command,
        "config": spec.model_dump(mode="python") if spec is not None else {},
        "seed": seed,
        "rng": RNG_ALGORITHM,
        **extra,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }


# commands ---------------------------------------------------------------------


def _cmd_simulate(args, spec, out: OutputDir) -> dict:
    cfg = spec.build(args.seed)
    cfg.validate_majorant()
    est = simulate_paths(cfg, args.workers)
    _write_ensemble(out, est, cfg.windows)
    return {"seed": cfg.seed, "grid": {"bin_width": cfg.bin_width, "age_max": cfg.age_max},
            "stepper": {"kind": cfg.stepper, "dt": cfg.dt, "majorant_window": cfg.majorant_window}}


def _write_ensemble(out: OutputDir, est, windows) -> None:
    centers = est.bin_centers
    out.write_csv("n_marginal.csv", ("t", "n", "probability"),
                  ((t, n, p) for t in est.times for n, p in est.n_marginal(t).items()))

    def age_rows():
        for t in est.times:
            for n in sorted(est.slots[est.time_index(t)].age_sums):
                dens = est.age_density(t, n)
                for k in np.flatnonzero(dens):
                    yield t, n, centers[k], dens[k]

    out.write_csv("age_density.csv", ("t", "n", "a", "density"), age_rows())

    def pair_rows():
        for t in est.times:
            p = est.pair_density(t)
            for i, j in zip(*np.nonzero(p)):
                yield t, centers[i], centers[j], p[i, j]

    out.write_csv("pair_density.csv", ("t", "a1", "a2", "density"), pair_rows())

    def window_rows():
        for t in est.times:
            for lo, hi in windows:
                s = window_count_stats(est, (lo, hi), t)
                yield t, lo, hi, s.mean, s.var, s.se_mean, s.se_var

    out.write_csv("windows.csv", ("t", "a_lo", "a_hi", "mean", "var", "se_mean", "se_var"), window_rows())


def _output_times(spec, horizon: float) -> list[float]:
    return sorted(spec.output_times) if spec.output_times else [horizon]


def _cmd_solve_mvf(args, spec, out: OutputDir) -> dict:
    g = spec.density()
    sol = solve_mvf(g, spec.birth.build(), spec.death.build(), spec.horizon)
    out.write_csv("total.csv", ("t", "total", "B"),
                  ((t, sol.total(j), sol.B.values[j]) for j, t in enumerate(sol.times)))

    def rows():
        for t in _output_times(spec, spec.horizon):
            j = sol.time_index(t)
            for a, v in zip(sol.ages, sol.rho_at(j)):
                yield t, a, v

    out.write_csv("density.csv", ("t", "a", "rho"), rows())
    return {"grid": {"dt": spec.dt, "age_max": float(g.t_end)}}


def _cmd_moments(args, spec, out: OutputDir) -> dict:
    beta, mu = spec.birth.build(), spec.death.build()
    x1 = solve_factorial_moment_k1(spec.density(), beta, mu, spec.horizon)
    x2 = solve_factorial_moment_k2(x1, beta, mu, method=spec.method) if spec.order == 2 else None

    def rows():
        for t in _output_times(spec, spec.horizon):
            for lo, hi in spec.windows:
                m, v = window_mean_var(x1, x2, (lo, hi), t)
                yield (t, lo, hi, m, v) if x2 is not None else (t, lo, hi, m, math.nan)

    out.write_csv("windows.csv", ("t", "a_lo", "a_hi", "mean", "var"), rows())

    def x1_rows():
        for t in _output_times(spec, spec.horizon):
            ages, vals = x1.grid(t, spec.field_stride)
            yield from ((t, a, v) for a, v in zip(ages, vals))

    out.write_csv("x1.csv", ("t", "a", "X1"), x1_rows())
    if x2 is not None:
        def x2_rows():
            for t in _output_times(spec, spec.horizon):
                ages, vals = x2.grid(t, spec.field_stride)
                for p, q in zip(*np.triu_indices(ages.size)):
                    yield t, ages[p], ages[q], vals[p, q]

        out.write_csv("x2.csv", ("t", "a", "b", "X2"), x2_rows())
    return {"grid": {"dt": spec.dt, "field_stride": spec.field_stride}, "order": spec.order}


def _cmd_fission(args, spec, out: OutputDir) -> dict:
    beta, mu = spec.rates()
    kw = {}
    if spec.singlets is not None:
        law = spec.singlets.build()
        a_max = math.ceil(law.upper_quantile(1e-14) / spec.dt) * spec.dt
        kw["singlets0"] = spec.singlets.grid_density(a_max, spec.dt, spec.singlet_count)
    field_ = solve_fission_B(beta, mu, spec.horizon, dt=spec.dt, **kw)
    T = field_.T_total.values
    idx = np.arange(0, field_.n_times, spec.output_stride)
    cols = ["t", "B", "T"]
    bh = None
    if spec.branching is not None and spec.singlets is None:
        bh = bellman_harris_mean(spec.branching.build(), spec.horizon, dt=spec.dt).values
        cols.append("T_bellman_harris")
    rows = ((field_.times[j], field_.B.values[j], T[j]) + ((bh[j],) if bh is not None else ()) for j in idx)
    out.write_csv("fission.csv", cols, rows)
    out.write_csv("fields.csv", ("x", "t", "X", "Y", "T"), zip(*field_.grid_fields(spec.field_stride)))
    return {"grid": {"dt": spec.dt, "output_stride": spec.output_stride, "field_stride": spec.field_stride}}


def _cmd_spatial(args, spec, out: OutputDir) -> dict:
    cfg = spec.build_spatial(args.seed)
    res = simulate_spatial(cfg, args.workers)
    est = res.ensemble
    out.write_csv("n_marginal.csv", ("t", "n", "probability"),
                  ((t, n, p) for t in est.times for n, p in est.n_marginal(t).items()))
    ac = est.bin_centers
    qc = 0.5 * (res.q_edges[1:] + res.q_edges[:-1])

    def rows():
        for t in est.times:
            d = res.aq_density(t)
            for i, j in zip(*np.nonzero(d)):
                yield t, ac[i], qc[j], d[i, j]

    out.write_csv("aq_density.csv", ("t", "a", "q", "density"), rows())
    return {"seed": cfg.base.seed, "grid": {"bin_width": cfg.base.bin_width, "q_bin_width": cfg.q_bin_width,
                                            "dt": cfg.base.dt}, "diffusion": cfg.diffusion}


def _print_table(results: list[CriterionResult], stream) -> None:
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.key:<4} {status}  {r.title}", file=stream)
        for c in r.failures():
            print(f"       failed: {c.name} value={_fmt(c.value)} target={_fmt(c.target)}", file=stream)


def _cmd_validate(args, out: OutputDir) -> tuple[dict, int]:
    seed = DEFAULT_SEED if args.seed is None else args.seed

    def progress(r):
        log.info("%s %s (%.1f s)", r.key, "pass" if r.passed else "FAIL", r.elapsed)

    if args.quick:
        results = quick_suite(seed, args.workers, log=progress)
    else:
        results = run_suite(seed, args.workers, only=set(args.only) if args.only else None, log=progress)
    out.write_csv("validation.csv", ("criterion", "check", "value", "target", "tolerance", "passed"),
                  results_table(results))
    _print_table(results, sys.stdout)
    ok = all(r.passed for r in results)
    extra = {"seed": seed, "suite": "quick" if args.quick else "full",
             "timings": {r.key: round(r.elapsed, 3) for r in results}}
    return extra, EXIT_OK if ok else EXIT_NUMERIC


def _cmd_celldiv(args) -> int:
    kinds = ("B", "T") if args.kind == "both" else (args.kind,)
    for t in args.t:
        parts = [f"t={_fmt(t)}"]
        for k in kinds:
            f = celldiv.B_closed_form if k == "B" else celldiv.T_closed_form
            parts.append(f"{k}={f(args.alpha, t):.6f}")
        if args.check and t > 0:
            shift = celldiv.inversion_abscissa(args.alpha)
            for k in kinds:
                tr = celldiv.B_transform if k == "B" else celldiv.T_transform
                inv = celldiv.numerical_laplace_inverse(tr(args.alpha), t, shift=shift)
                parts.append(f"{k}_inverse={inv.value:.6f}")
        print(" ".join(parts))
    return EXIT_OK


def _write_celldiv(args, out: OutputDir) -> dict:
    times = sorted(args.t)
    a = args.alpha
    out.write_csv("celldiv.csv", ("t", "B", "T", "markov", "galton_watson"),
                  ((t, celldiv.B_closed_form(a, t), celldiv.T_closed_form(a, t),
                    celldiv.reference_growth("markov", t), celldiv.reference_growth("galton_watson", t))
                   for t in times))

    def surface():
        for t in times:
            if t <= 0:
                continue
            xs = t * np.arange(1, args.surface_points + 1) / args.surface_points
            yield from ((x, t, v) for x, v in zip(xs, celldiv.age_time_distribution(a, xs, t)))

    out.write_csv("surface.csv", ("x", "t", "T"), surface())
    return {"alpha": a, "times": times, "surface_points": args.surface_points}


# argument parsing ---------------------------------------------------------------


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agekin", description="Age-structured population kinetics.")
    p.add_argument("--version", action="version", version=f"agekin {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required: bool):
        sp.add_argument("config", nargs=None if config_required else "?", help="YAML config file")
        sp.add_argument("-o", "--output-dir", help=f"output directory (env {ENV_OUTPUT})")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("-w", "--workers", type=int, help=f"worker processes (env {ENV_WORKERS})")
        sp.add_argument("-v", "--verbose", action="count", default=0)

    for name, helptext in (
        ("simulate", "Monte Carlo over full age charts"),
        ("solve-mvf", "mean-field age density by characteristics + renewal"),
        ("moments", "first and second factorial moments and window statistics"),
        ("fission", "binary-fission mean field"),
        ("spatial", "Monte Carlo with diffusion"),
    ):
        common(sub.add_parser(name, help=helptext), True)

    v = sub.add_parser("validate", help="run the reconciliation suite")
    v.add_argument("-o", "--output-dir")
    v.add_argument("--seed", type=int)
    v.add_argument("-w", "--workers", type=int)
    v.add_argument("-v", "--verbose", action="count", default=0)
    v.add_argument("--quick", action="store_true", help="shape-1 identities only")
    v.add_argument("--only", nargs="+", metavar="KEY", help="criterion keys such as C1 C6")

    c = sub.add_parser("celldiv", help="Gamma fission closed forms")
    c.add_argument("--alpha", type=float, required=True)
    c.add_argument("--t", type=float, nargs="+", required=True)
    c.add_argument("--kind", choices=("B", "T", "both"), default="both")
    c.add_argument("--check", action="store_true", help="also print the numerical Laplace inversion")
    c.add_argument("-o", "--output-dir", help="also write celldiv.csv and surface.csv here")
    c.add_argument("--surface-points", type=_positive_int, default=50, help="birth-time nodes per t in surface.csv")
    c.add_argument("-v", "--verbose", action="count", default=0)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv`` and execute; returns the process exit code."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    started = time.perf_counter()
    try:
        if args.command == "celldiv":
            code = _cmd_celldiv(args)
            if args.output_dir is not None:
                out = OutputDir(Path(args.output_dir))
                out.write_manifest(_manifest("celldiv", None, None, _write_celldiv(args, out), started))
            return code
        args.workers = resolve_workers(args.workers)
        root = Path(args.output_dir or os.environ.get(ENV_OUTPUT) or "agekin-output")
        if args.command == "validate":
            out = OutputDir(root)
            extra, code = _cmd_validate(args, out)
            out.write_manifest(_manifest("validate", None, extra.pop("seed"), extra, started))
            return code
        spec = parse_config(args.command, load_mapping(args.config))
        if args.seed is not None and "seed" in type(spec).model_fields:
            # echo the seed actually used so the manifest reproduces the run
            spec = spec.model_copy(update={"seed": args.seed})
        out = OutputDir(root)
        handler = {
            "simulate": _cmd_simulate,
            "solve-mvf": _cmd_solve_mvf,
            "moments": _cmd_moments,
            "fission": _cmd_fission,
            "spatial": _cmd_spatial,
        }[args.command]
        extra = handler(args, spec, out)
        seed = extra.pop("seed", getattr(spec, "seed", None))
        out.write_manifest(_manifest(args.command, spec, seed, extra, started))
        log.info("wrote %s", out.root)
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AgekinError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())
