"""Command line runner: ``cgmc <subcommand> --config run.ini``.

Configuration is an INI file.  Sections and keys (all optional unless a
subcommand needs them)::

    [kernel]      name = triangle | gaussian | mff | path to a two-column table
                  dimension, m
    [grid]        n_points, extent
    [schedule]    n_levels, ratio, first
    [params]      d, gamma, beta
    [mc]          n_replicas, seed, threads, chunk
    [experiment]  subcommand specific, see the ``cmd_*`` docstrings
    [run]         exploratory = true | false, tol

Exit codes: 0 success, 1 a check failed, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .chaos import (
    ChaosParams,
    ConjecturalPhaseError,
    PhaseError,
    TestFunction,
    classify_phase,
    critical_p,
    renormalization_factor,
    zeta,
)
from .fields import Grid, SpectralMassError, export_csv, star_sampler
from .kernels import (
    CutoffSchedule,
    Kernel,
    KernelValidationError,
    QuadratureError,
    load_tabulated_kernel,
    make_kernel,
    sigma2_with_error,
)
from .lqg import (
    PlanarDomain,
    circle_average,
    circle_average_variance,
    conformal_radius,
    conformal_radius_from_green,
    gff_sample_basis,
)
from .matching import optimal_matching
from .moments import (
    batch_means,
    gaussianity_ratio,
    mc_absolute_moment,
    multifractal_fit,
    renormalized_second_moment,
    sample_chaos_values,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunContext:
    config: configparser.ConfigParser
    seed: int
    threads: int
    exploratory: bool
    out: Path
    checks: dict[str, bool] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def get(self, section: str, key: str, fallback=None):
        if self.config.has_option(section, key):
            return self.config.get(section, key)
        if fallback is None:
            raise ConfigError(f"missing [{section}] {key}")
        return fallback

    def getfloat(self, section: str, key: str, fallback=None) -> float:
        try:
            return float(self.get(section, key, fallback))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} is not a number") from exc

    def getint(self, section: str, key: str, fallback=None) -> int:
        try:
            return int(self.get(section, key, fallback))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} is not an integer") from exc

    def floats(self, section: str, key: str, fallback=None) -> list[float]:
        raw = self.get(section, key, fallback)
        try:
            return [float(v) for v in str(raw).replace(",", " ").split()]
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a list of numbers") from exc

    def map_fn(self) -> Callable:
        if self.threads <= 1:
            return map
        pool = ThreadPoolExecutor(self.threads)

        def run(fn, items):
            # Executor.map yields in submission order, so results stay replica ordered
            with pool:
                return list(pool.map(fn, items))

        return run


# ---------------------------------------------------------------------------
# config blocks

def _kernel(ctx: RunContext) -> Kernel:
    name = ctx.get("kernel", "name", "triangle")
    dim = ctx.getint("kernel", "dimension", ctx.get("params", "d", "1"))
    if Path(name).suffix in (".csv", ".txt", ".dat"):
        return load_tabulated_kernel(name, dim)
    extra = {"m": ctx.getfloat("kernel", "m")} if ctx.config.has_option("kernel", "m") else {}
    return make_kernel(name, dim, **extra)


def _params(ctx: RunContext) -> ChaosParams:
    try:
        return ChaosParams(
            ctx.getint("params", "d", "1"), ctx.getfloat("params", "gamma", "0"), ctx.getfloat("params", "beta", "0")
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _schedule(ctx: RunContext) -> CutoffSchedule:
    n = ctx.getint("schedule", "n_levels", "8")
    ratio = ctx.getfloat("schedule", "ratio", "0.5")
    first = ctx.getfloat("schedule", "first", str(ratio))
    return CutoffSchedule.geometric(n, ratio, first)


def _grid(ctx: RunContext, dimension: int) -> Grid:
    return Grid(dimension, ctx.getfloat("grid", "extent", "1.0"), ctx.getint("grid", "n_points", "4096"))


def _n_replicas(ctx: RunContext) -> int:
    return ctx.getint("mc", "n_replicas", "1000")


def _interval(ctx: RunContext, key: str = "region", fallback: str = "0 1") -> tuple[float, float]:
    v = ctx.floats("experiment", key, fallback)
    if len(v) != 2 or not v[0] < v[1]:
        raise ConfigError(f"[experiment] {key} must be 'lo hi'")
    return v[0], v[1]


def _region_phi(ctx: RunContext, d: int) -> TestFunction:
    lo, hi = _interval(ctx)
    kind = ctx.get("experiment", "test_function", "indicator")
    return TestFunction(((lo + hi) / 2,) * d, (hi - lo) / 2, kind, "box")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# subcommands; each returns (header, rows)

def cmd_phase(ctx: RunContext):
    """Phase label, ``p_c``, ``zeta`` and renormalization factor per level.

    ``[experiment] p_values`` lists the points of the zeta curve.
    """
    params = _params(ctx)
    sched = _schedule(ctx)
    tol = ctx.getfloat("run", "tol", "1e-12")
    label = classify_phase(params, tol)
    if not label.rigorous_renormalization and not ctx.exploratory:
        raise ConfigError(f"{label.value}: renormalization is conjectural; pass --exploratory")
    pc = critical_p(params)
    if not pc.finite:
        ctx.warnings.append(f"critical_p: {pc.message}")
    ps = ctx.floats("experiment", "p_values", "1 2")
    header = ["level", "epsilon", "phase", "rigorous", "p_c"] + [f"zeta_{p:g}" for p in ps] + ["factor"]
    rows = []
    for j, eps in enumerate(sched):
        f = renormalization_factor(params, eps, ctx.exploratory) if eps < 1 else 1.0
        rows.append([j, eps, label.value, label.rigorous_renormalization, pc.value] + [zeta(params, p) for p in ps] + [f])
    ctx.checks["zeta_at_p_c"] = (not pc.finite) or abs(zeta(params, pc.value) - params.d) < 1e-12 * max(1, params.d)
    return header, rows


def cmd_sigma2(ctx: RunContext):
    """``sigma^2(s)`` with its error bound; ``[experiment] s`` defaults to ``gamma^2 + beta^2``."""
    kernel = _kernel(ctx)
    params = _params(ctx)
    s = ctx.getfloat("experiment", "s", repr(params.s))
    val, err = sigma2_with_error(kernel, s, kernel.dimension)
    return ["kernel", "d", "s", "sigma2", "abserr"], [[kernel.name, kernel.dimension, s, val, err]]


def cmd_sample(ctx: RunContext):
    """Sample the star field, compare level variances with ``log(1/eps)``.

    ``[experiment] dump`` optionally names a CSV for replica 0.
    """
    kernel = _kernel(ctx)
    grid = _grid(ctx, kernel.dimension)
    sched = _schedule(ctx)
    n = _n_replicas(ctx)
    sampler = star_sampler(kernel, grid, sched)
    if sampler.clamped_mass > 0:
        ctx.warnings.append(f"clamped spectral mass {sampler.clamped_mass:.3e}")
    chunk = ctx.getint("mc", "chunk", "128")
    centre = tuple(int(s) // 2 for s in grid.shape)

    def run(reps):
        f = sampler.sample(ctx.seed, reps)
        return f.values[(slice(None), slice(None)) + centre]

    vals = np.concatenate(list(ctx.map_fn()(run, [range(i, min(i + chunk, n)) for i in range(0, n, chunk)])))
    mean, se = batch_means(vals**2)
    rows = []
    ok = True
    for j, eps in enumerate(sched):
        target = sampler.variances[j]
        ok &= abs(mean[j] - target) <= 3 * se[j]
        rows.append([j, eps, target, mean[j], se[j], n])
    ctx.checks["variance_within_3se"] = bool(ok)
    dump = ctx.get("experiment", "dump", "")
    if dump:
        export_csv(sampler.sample(ctx.seed, 1), ctx.out / dump)
    return ["level", "epsilon", "target_variance", "empirical_variance", "stderr", "n"], rows


def cmd_moments(ctx: RunContext):
    """``[experiment] q``, ``region = lo hi``, ``method = mc | quadrature | both``."""
    kernel = _kernel(ctx)
    params = _params(ctx)
    sched = _schedule(ctx)
    qs = ctx.floats("experiment", "q", "2")
    method = ctx.get("experiment", "method", "both")
    if method not in ("mc", "quadrature", "both"):
        raise ConfigError("[experiment] method must be mc, quadrature or both")
    lo, hi = _interval(ctx)
    region = [(lo, hi)] * kernel.dimension
    header = ["epsilon", "q", "re_value", "im_value", "stderr", "n", "method"]
    rows = []
    mc = {}
    if method in ("mc", "both"):
        grid = _grid(ctx, kernel.dimension)
        phi = _region_phi(ctx, kernel.dimension)
        sampler = star_sampler(kernel, grid, sched)
        samples = sample_chaos_values(
            sampler, params, [phi], _n_replicas(ctx), ctx.seed, ctx.getint("mc", "chunk", "128"),
            ctx.map_fn(), ctx.exploratory,
        )
        ctx.warnings.extend(samples.warnings)
        for q in qs:
            for est in mc_absolute_moment(samples, q):
                mc[est.epsilon, q] = est
                rows.append([est.epsilon, q, est.value.real, est.value.imag, est.stderr, est.n_samples, "mc"])
    if method in ("quadrature", "both"):
        ok = True
        for eps in sched:
            est = renormalized_second_moment(kernel, params, eps, region, ctx.exploratory)
            rows.append([eps, 2.0, est.value.real, 0.0, est.stderr, 0, "quadrature"])
            if (eps, 2.0) in mc:
                m = mc[eps, 2.0]
                ok &= abs(m.value.real - est.value.real) <= 3 * m.stderr + est.stderr
        if method == "both" and 2.0 in qs:
            ctx.checks["mc_matches_quadrature"] = bool(ok)
    return header, rows


def cmd_multifractal(ctx: RunContext):
    """``[experiment] q``, ``radii`` (decreasing), ``centre``, ``slope_tolerance``."""
    kernel = _kernel(ctx)
    params = _params(ctx)
    sched = _schedule(ctx)
    grid = _grid(ctx, kernel.dimension)
    q = ctx.getfloat("experiment", "q", "2")
    radii = ctx.floats("experiment", "radii", "0.25 0.125 0.0625 0.03125 0.015625")
    c = ctx.getfloat("experiment", "centre", repr(grid.extent / 2))
    phis = [TestFunction((c,) * kernel.dimension, r, "indicator", "box") for r in radii]
    sampler = star_sampler(kernel, grid, sched)
    samples = sample_chaos_values(
        sampler, params, phis, _n_replicas(ctx), ctx.seed, ctx.getint("mc", "chunk", "128"),
        ctx.map_fn(), ctx.exploratory,
    )
    ctx.warnings.extend(samples.warnings)
    ests = [(r, mc_absolute_moment(samples, q, i)[-1]) for i, r in enumerate(radii)]
    fit = multifractal_fit(ests, q)
    ctx.warnings.extend(fit.warnings)
    target = zeta(params, q)
    tol = ctx.getfloat("experiment", "slope_tolerance", "0.15")
    ctx.checks["slope_near_zeta"] = abs(fit.slope - target) <= tol
    rows = [["moment", r, e.value.real, e.stderr, ""] for r, e in ests]
    rows.append(["fit", "", fit.slope, fit.slope_stderr, target])
    return ["row", "radius", "value", "stderr", "zeta"], rows


def cmd_gaussianity(ctx: RunContext):
    """``[experiment] k``, ``kc``, ``region = lo hi``, ``levels`` (indices, default last three)."""
    kernel = _kernel(ctx)
    params = _params(ctx)
    sched = _schedule(ctx)
    grid = _grid(ctx, kernel.dimension)
    k = ctx.getint("experiment", "k", "2")
    kc = ctx.getint("experiment", "kc", "2")
    region = _interval(ctx)
    n = len(sched)
    levels = [int(v) for v in ctx.floats("experiment", "levels", " ".join(str(j) for j in range(max(0, n - 3), n)))]
    field_ = star_sampler(kernel, grid, sched).sample(ctx.seed, _n_replicas(ctx))
    rows = []
    for j in levels:
        r = gaussianity_ratio(field_, params, j, k, kc, region)
        rows.append([sched.levels[j], k, kc, float(np.median(r.real)), float(np.median(np.abs(r))), r.size])
    return ["epsilon", "k", "kc", "median_re", "median_abs", "n"], rows


def cmd_gff(ctx: RunContext):
    """``[experiment] points`` (x1 y1 x2 y2 ...), ``radii``, ``modes``; MC when ``[mc] n_replicas > 0``."""
    dom = PlanarDomain("unit_square")
    flat = ctx.floats("experiment", "points", "0.5 0.5")
    if len(flat) % 2:
        raise ConfigError("[experiment] points must come in pairs")
    pts = [complex(a, b) for a, b in zip(flat[::2], flat[1::2])]
    radii = ctx.floats("experiment", "radii", "0.125 0.0625 0.03125 0.015625 0.0078125")
    J = ctx.getint("experiment", "modes", "128")
    n = ctx.getint("mc", "n_replicas", "0")
    sample = gff_sample_basis(J, ctx.seed, n) if n else None
    rows = []
    for x in pts:
        c = conformal_radius(dom, x)
        for r in radii:
            ce = conformal_radius_from_green(dom, x, r)
            var_exact = circle_average_variance(J, x, r)
            var_mc = se = math.nan
            if sample is not None:
                v = circle_average(sample, x, r)
                var_mc = float(np.mean(v * v))
                se = float(np.std(v * v, ddof=1) / math.sqrt(n))
            rows.append([x.real, x.imag, c, r, ce, var_exact, var_mc, se])
    return ["x1", "x2", "conformal_radius", "epsilon", "C_eps", "var_exact", "var_mc", "stderr"], rows


def cmd_match(ctx: RunContext):
    """``[experiment] points`` names a CSV with columns ``set,x`` where set is ``x`` or ``y``."""
    path = Path(ctx.get("experiment", "points"))
    xs, ys = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            (xs if row["set"].strip() == "x" else ys).append(float(row["x"]))
    m = optimal_matching(xs, ys)
    if m.tie_broken:
        ctx.warnings.append("matching: tied distances broken lexicographically")
    return ["x_index", "y_index"], [[i + 1, j + 1] for i, j in enumerate(m.assignment)]


COMMANDS = {
    "phase": cmd_phase,
    "sigma2": cmd_sigma2,
    "sample": cmd_sample,
    "moments": cmd_moments,
    "multifractal": cmd_multifractal,
    "gaussianity": cmd_gaussianity,
    "gff": cmd_gff,
    "match": cmd_match,
}


# ---------------------------------------------------------------------------

def write_results(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def write_manifest(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    os.replace(tmp, path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgmc", description="Complex Gaussian multiplicative chaos experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--seed", type=int, help="overrides [mc] seed")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--threads", type=int, help="worker threads (default: CPU count)")
    p.add_argument("--exploratory", action="store_true", help="allow conjectural renormalizations")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    cfg = configparser.ConfigParser()
    if args.config is not None:
        if not args.config.exists():
            print(f"config file {args.config} not found", file=sys.stderr)
            return EXIT_CONFIG
        cfg.read(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("mc", "seed", fallback="0"))
    threads = args.threads or int(cfg.get("mc", "threads", fallback=str(os.cpu_count() or 1)))
    exploratory = args.exploratory or cfg.getboolean("run", "exploratory", fallback=False)
    args.out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg, seed, threads, exploratory, args.out)
    code = EXIT_OK
    try:
        header, rows = COMMANDS[args.command](ctx)
        write_results(args.out / "results.csv", header, rows)
        if not all(ctx.checks.values()):
            code = EXIT_CHECK
    except (ConfigError, ConjecturalPhaseError, PhaseError, KernelValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        ctx.warnings.append(f"error: {exc}")
        code = EXIT_CONFIG
    except (QuadratureError, SpectralMassError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        ctx.warnings.append(f"error: {exc}")
        code = EXIT_CHECK
    write_manifest(
        args.out / "manifest.json",
        {
            "version": __version__,
            "command": args.command,
            "seed": seed,
            "config": {s: dict(cfg[s]) for s in cfg.sections()},
            "checks": ctx.checks,
            "warnings": list(dict.fromkeys(ctx.warnings)),
            "exit_code": code,
            "started_at": started.isoformat(),
            "wall_seconds": time.perf_counter() - t0,
        },
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
