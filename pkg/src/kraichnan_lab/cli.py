"""``kraichnan-lab``: experiments as subcommands with config files, seeds and machine-readable output.

Exit codes: 0 success, 1 unexpected error, 2 config/schema error,
3 resolution or stability violation, 4 insufficient replicas,
5 a check failed and ``--strict`` was given.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import SchemaError, load_config, load_schema
from .covariance import ConfigurationError, InsufficientReplicas, effective_diffusivity

EXIT_OK, EXIT_ERROR, EXIT_SCHEMA, EXIT_RESOLUTION, EXIT_REPLICAS, EXIT_CHECK = 0, 1, 2, 3, 4, 5

SECTIONS = {
    "synth-check": ("synth",),
    "annealed": ("annealed",),
    "quenched": ("quenched",),
    "chi": ("chi", "sm", "envelope"),
    "corrector": ("corrector",),
    "moment-cross": ("moment_cross",),
    "llt": ("llt",),
    "report": (),
}


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def map_chunks(fn, jobs, workers: int) -> list:
    """Run ``fn`` over job descriptions; results come back in job order whatever the worker count."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _chunks(first: int, count: int, size: int) -> list:
    return [(s, min(size, first + count - s)) for s in range(first, first + count, size)]


def _dt(cfg, spec, grid):
    from .fieldsynth import default_dt

    return cfg["time"]["dt"] or default_dt(spec, grid, cfg["time"]["scheme"])


# ----- subcommands ---------------------------------------------------------------------


def cmd_synth(cfg, out: Path, workers: int) -> dict:
    from .fieldsynth import increment_statistics

    spec, grid = cfg.spec(), cfg.grid()
    s = cfg["synth"]
    st = increment_statistics(spec, grid, s["dt"], s["draws"], s["lags"], cfg["run"]["master_seed"])
    rows, worst = [], 0.0
    z = st.zscores()
    d = grid.dimension
    for li, lag in enumerate(st.lags):
        for i in range(d):
            for j in range(d):
                rows.append([lag, i, j, st.empirical[li, i, j], st.stderr[li, i, j], st.expected[li, i, j], z[li, i, j]])
                worst = max(worst, abs(z[li, i, j]))
    write_csv(out / "increment_covariance.csv", ["lag", "i", "j", "estimate", "stderr", "expected", "zscore"], rows)
    checks = {"covariance_within_3se": worst <= 3.0}
    if spec.family == "incompressible":
        checks["divergence_free"] = st.max_divergence <= s["divergence_tolerance"]
    return {"checks": checks, "max_abs_zscore": worst, "max_divergence": st.max_divergence, "outputs": ["increment_covariance.csv"]}


def _annealed_job(args):
    spec, grid, particles, horizon, dt, first, count, seed = args
    from .flow import simulate_replicas

    out = simulate_replicas(spec, grid, particles, horizon, dt, range(first, first + count), seed)
    return [(o.replica, o.second_moment[-1] / o.times[-1], o.mean[-1]) for o in out]


def cmd_annealed(cfg, out: Path, workers: int) -> dict:
    spec, grid = cfg.spec(), cfg.grid()
    a = cfg["annealed"]
    dt = _dt(cfg, spec, grid)
    jobs = [(spec, grid, a["particles"], a["horizon"], dt, f, c, cfg["run"]["master_seed"])
            for f, c in _chunks(0, a["replicas"], cfg["run"]["chunk"])]
    per = [r for chunk in map_chunks(_annealed_job, jobs, workers) for r in chunk]
    if len(per) < 2:
        raise InsufficientReplicas("annealed statistics need at least 2 replicas")
    cov = np.array([p[1] for p in per])
    mean, se = cov.mean(axis=0), cov.std(axis=0, ddof=1) / np.sqrt(len(per))
    expected = effective_diffusivity(spec)
    d = spec.dimension
    rows, worst = [], 0.0
    for i in range(d):
        for j in range(d):
            z = (mean[i, j] - expected[i, j]) / se[i, j]
            worst = max(worst, abs(z))
            rows.append([i, j, mean[i, j], se[i, j], expected[i, j], z])
    write_csv(out / "annealed_covariance.csv", ["i", "j", "estimate", "stderr", "expected", "zscore"], rows)
    return {"checks": {"covariance_within_tolerance": worst <= a["sigma_tolerance"]}, "max_abs_zscore": worst,
            "dt": dt, "outputs": ["annealed_covariance.csv"]}


def cmd_quenched(cfg, out: Path, workers: int) -> dict:
    from .fieldsynth import Environment
    from .gridspde import duality_check, evolve_batch, gaussian_on_grid

    spec, grid = cfg.spec(), cfg.grid()
    q = cfg["quenched"]
    rep = duality_check(spec, grid, q["horizon"], q["particles"], q["bandwidth"], q["replica"],
                        cfg["run"]["master_seed"], q["bulk_sigmas"], cfg["time"]["scheme"])
    rows = [[*x, u, k, b, s, e] for x, u, k, b, s, e in
            zip(rep.x, rep.grid_u, rep.kde_u, rep.bias, rep.mc_se, rep.scheme_error)]
    names = [f"x{i + 1}" for i in range(grid.dimension)]
    write_csv(out / "duality.csv", names + ["grid_u", "kde_u", "bias", "mc_stderr", "scheme_error"], rows)
    dt = _dt(cfg, spec, grid)
    env = Environment(spec, grid, dt, cfg["run"]["master_seed"])
    u0 = gaussian_on_grid(spec, grid, cfg["time"]["reg_steps"] * dt)
    u = evolve_batch(env, u0[None], [q["replica"]], 0, q["mass_steps"], cfg["time"]["scheme"])[0]
    drift = abs(u.sum() * grid.cell_volume - 1.0)
    neg = float(-u.min() / u.max())
    checks = {
        "duality_within_budget": rep.sup_budget_ratio <= q["budget_factor"],
        "mass_conserved": drift <= q["mass_tolerance"],
        "negativity_monitor": neg <= q["negativity_tolerance"],
    }
    return {"checks": checks, "sup_error": rep.sup_error, "budget_ratio": rep.sup_budget_ratio,
            "smoothed_ratio": rep.smoothed_ratio, "mass_drift": drift, "negativity": neg, "outputs": ["duality.csv"]}


def cmd_chi(cfg, out: Path, workers: int) -> dict:
    from .fieldsynth import Grid
    from .moment2 import (
        ZField,
        chi_on_grid,
        envelope_violation,
        fit_envelope_constant,
        gaussian_bump,
        solve_chi_numeric,
        solve_sm,
        stationarity_residual,
    )

    spec, grid = cfg.spec(), cfg.grid()
    c = cfg["chi"]
    chi = solve_chi_numeric(spec, grid, c["normalization"], c["method"])
    result = {"outputs": ["chi.csv"], "checks": {}}
    ref = None
    if spec.family == "isotropic-scalar":
        ref = chi_on_grid(spec, grid, c["normalization"])
        sup = float(np.abs(chi.values - ref).max())
        r1 = stationarity_residual(ZField(grid, chi_on_grid(spec, grid), 0.0), spec)
        fine = Grid(grid.dimension, grid.n * 2, grid.length)
        r2 = stationarity_residual(ZField(fine, chi_on_grid(spec, fine), 0.0), spec)
        ratio = r1 / r2
        result.update(sup_error=sup, residual_coarse=r1, residual_fine=r2, refinement_ratio=ratio,
                      numeric_residual=stationarity_residual(chi, spec))
        result["checks"]["closed_form_sup"] = sup <= c["sup_tolerance"]
        result["checks"]["second_order_residual"] = abs(ratio - c["refinement_ratio"]) <= c["refinement_band"]
        # S_T -> chi on a large box
        sm = cfg["sm"]
        zg = Grid(spec.dimension, sm["points_per_side"], sm["box_length"])
        if spec.dimension == 1:
            target = chi_on_grid(spec, zg, "box-mean")
            _, rec = solve_sm(spec, zg, max(sm["horizons"]), record_times=sm["horizons"])
            errs = [float(np.abs(r.values - target).max()) for r in rec]
            slope = float(np.polyfit(np.log(sm["horizons"]), np.log(errs), 1)[0])
            write_csv(out / "sm_convergence.csv", ["T", "sup_error"], zip(sm["horizons"], errs))
            result["outputs"].append("sm_convergence.csv")
            result["sm_slope"] = slope
            result["checks"]["sm_rate"] = abs(slope - sm["expected_slope"]) <= sm["slope_band"]
    else:
        result["chi_min"] = float(chi.values.min())
        result["chi_max"] = float(chi.values.max())
        result["numeric_residual"] = stationarity_residual(chi, spec)
        result["checks"]["positive"] = result["chi_min"] > 0
    chi.to_csv(out / "chi.csv", ref)
    e = cfg["envelope"]
    eg = Grid(spec.dimension, e["points_per_side"], e["box_length"])
    center = np.full(spec.dimension, e["bump_center"])
    _, snaps = solve_sm(spec, eg, max(e["times"]), S0=gaussian_bump(eg, center, e["bump_width"]), record_times=e["times"])
    C = fit_envelope_constant(snaps[:1], center)
    viol = [envelope_violation(s, C, center) for s in snaps]
    write_csv(out / "envelope.csv", ["t", "violation_fraction"], zip(e["times"], viol))
    result["outputs"].append("envelope.csv")
    result["envelope_C"] = C
    result["checks"]["envelope"] = max(viol) <= e["violation_tolerance"]
    return result


def _corrector_job(args):
    spec, grid, M, lag_times, first, count, seed, scheme = args
    from .corrector import run_batch
    from .fieldsynth import Environment, default_dt
    from .gridspde import aligned_dt

    env = Environment(spec, grid, aligned_dt(default_dt(spec, grid, scheme), (M, *lag_times)), seed)
    runs = run_batch(spec, grid, M, 0.0, range(first, first + count), env, scheme, extra_times=lag_times)
    return [[e.field.values for e in r] for r in runs]


def cmd_corrector(cfg, out: Path, workers: int) -> dict:
    from .corrector import CorrectorEstimate, jackknife_mean, two_point_correlation
    from .gridspde import DensityField
    from .moment2 import chi_on_grid

    spec, grid = cfg.spec(), cfg.grid()
    c = cfg["corrector"]
    if c["replicas"] < c["min_replicas"]:
        raise InsufficientReplicas(f"need at least {c['min_replicas']} replicas, got {c['replicas']}")
    unit = spec.corr_length**2 / spec.nu
    lags = [x * unit for x in c["lags"]]
    later = sorted({x for x in lags if x > 0})
    jobs = [(spec, grid, c["burn_in"], tuple(later), f, n, cfg["run"]["master_seed"], cfg["time"]["scheme"])
            for f, n in _chunks(0, c["replicas"], cfg["run"]["chunk"])]
    parts = map_chunks(_corrector_job, jobs, workers)
    fields = [np.concatenate([np.array(p[k]) for p in parts]) for k in range(1 + len(later))]
    first = [CorrectorEstimate(DensityField(grid, v, 0.0), c["burn_in"], i) for i, v in enumerate(fields[0])]
    ref = None
    if spec.family == "isotropic-scalar":
        ref = chi_on_grid(spec, grid, c["reference"])
    rows, worst = [], 0.0
    for z in c["separations"]:
        est = two_point_correlation(first, z, c["min_replicas"])
        idx = (int(round(z / grid.dx)),) + (0,) * (grid.dimension - 1)
        chi_z = float(ref[idx]) if ref is not None else 1.0
        zs = (est.value - chi_z) / est.stderr if est.stderr > 0 else (0.0 if abs(est.value - chi_z) < 1e-12 else np.inf)
        worst = max(worst, abs(zs))
        rows.append([z, est.value, est.stderr, chi_z, zs])
    write_csv(out / "two_point.csv", ["z", "estimate", "stderr", "chi", "zscore"], rows)
    lag_rows = []
    by_time = {0.0: fields[0], **{t: fields[i + 1] for i, t in enumerate(later)}}
    for x, tau in zip(c["lags"], lags):
        samples = np.mean((fields[0] - 1) * (by_time[tau] - 1), axis=tuple(range(1, grid.dimension + 1)))
        e = jackknife_mean(samples)
        lag_rows.append([x, tau, e.value, e.stderr])
    write_csv(out / "time_correlation.csv", ["lag_units", "tau", "estimate", "stderr"], lag_rows)
    checks = {"two_point_within_tolerance": worst <= c["sigma_tolerance"]}
    by_unit = {r[0]: r for r in lag_rows}
    if 1.0 in by_unit and 8.0 in by_unit and spec.family == "isotropic-scalar":
        a, b = by_unit[1.0], by_unit[8.0]
        checks["decorrelation"] = (a[2] - b[2]) > np.hypot(a[3], b[3])
    return {"checks": checks, "max_abs_zscore": worst, "min_field": float(fields[0].min()),
            "outputs": ["two_point.csv", "time_correlation.csv"]}


def cmd_moment_cross(cfg, out: Path, workers: int) -> dict:
    from .moment2 import mc_cross_check

    spec, grid = cfg.spec(), cfg.grid()
    m = cfg["moment_cross"]
    rep = mc_cross_check(spec, grid, range(m["replicas"]), m["horizon"], m["pairs"], m["z0"], m["width"],
                         cfg["time"]["dt"], cfg["run"]["master_seed"], chunk=cfg["run"]["chunk"],
                         min_replicas=m["min_replicas"])
    write_csv(out / "separation_density.csv", ["z", "mc_density", "mc_stderr", "pde_density"],
              zip(rep.centers, rep.mc_density, rep.mc_stderr, rep.pde_density))
    tol = m["sigma_tolerance"]
    checks = {
        "density_within_budget": rep.sup_discrepancy <= tol * rep.budget,
        "variance_within_tolerance": abs(rep.mc_var - rep.pde_var) <= tol * rep.mc_var_stderr,
    }
    return {"checks": checks, "sup_discrepancy": rep.sup_discrepancy, "budget": rep.budget,
            "mc_var": rep.mc_var, "mc_var_stderr": rep.mc_var_stderr, "pde_var": rep.pde_var,
            "outputs": ["separation_density.csv"]}


def _llt_job(args):
    from .llt import run_ladder

    plan, turnoff = args
    res = run_ladder(plan, turnoff)
    return res


def cmd_llt(cfg, out: Path, workers: int) -> dict:
    from dataclasses import replace as dc_replace

    from .llt import ErrorCurve, ExperimentPlan, rate_fit

    from .fieldsynth import Grid, check_resolution

    spec, p = cfg.spec(), cfg["llt"]
    base_grid = cfg.grid()
    grid = Grid(spec.dimension, p["points_per_side"] or base_grid.n, p["box_length"] or base_grid.length)
    check_resolution(spec, grid, cfg["grid"]["min_box_support_ratio"], cfg["grid"]["min_points_per_corr_length"])
    ladder = tuple(p["ladder_start"] * 2.0**k for k in range(p["ladder_points"]))
    base = ExperimentPlan(spec, grid, ladder, p["beta"], p["replicas"], p["probe_multipliers"], p["bulk_c"],
                          cfg["time"]["dt"], cfg["run"]["master_seed"], cfg["time"]["scheme"], cfg["time"]["reg_steps"],
                          cfg["run"]["chunk"])
    jobs = [(dc_replace(base, replicas=n, first_replica=f), p["turnoff"]) for f, n in _chunks(0, p["replicas"], cfg["run"]["chunk"])]
    parts = map_chunks(_llt_job, jobs, workers)

    def merge(attr):
        if getattr(parts[0], attr) is None:
            return None
        c0 = getattr(parts[0], attr)
        return ErrorCurve(c0.t, np.concatenate([getattr(r, attr).per_replica for r in parts]), c0.label, meta=c0.meta)

    d = spec.dimension
    curves = {"product": merge("product"), "turnoff": merge("turnoff"), "ratio": merge("ratio"), "lclt": merge("lclt")}
    result = {"ladder": list(ladder), "beta": base.beta, "dt": base.dt, "outputs": [], "fits": {}}
    for name, curve in curves.items():
        if curve is None:
            continue
        norm = curve if name == "ratio" else curve.normalized(d)
        norm.to_csv(out / f"{name}_curve.csv")
        result["outputs"].append(f"{name}_curve.csv")
        if len(ladder) >= 4 and np.all(norm.values > 0):
            f = rate_fit(norm)
            result["fits"][name] = {"slope": f.slope, "ci": [f.ci_low, f.ci_high], "method": f.method}
    result["min_ratio"] = max(r.min_ratio for r in parts)
    fit = result["fits"].get("product")
    if spec.is_incompressible:
        lc = curves["lclt"].values
        result["checks"] = {"lclt_decreasing": bool(np.all(np.diff(lc) < 0)) and lc[-1] <= lc[0] / 4}
    else:
        prod = curves["product"].normalized(d)
        result["checks"] = {
            "product_decreasing": prod.strictly_decreasing(),
            "product_slope": bool(fit and fit["slope"] <= p["max_slope"] and fit["ci"][1] < 0),
        }
    return result


def cmd_report(cfg, out: Path, workers: int) -> dict:
    rows = []
    for manifest in sorted(out.parent.glob("*/manifest.json")):
        data = json.loads(manifest.read_text())
        for check, ok in data.get("result", {}).get("checks", {}).items():
            rows.append([data["subcommand"], check, "pass" if ok else "FAIL", data.get("wall_seconds", "")])
    write_csv(out / "summary.csv", ["subcommand", "check", "status", "wall_seconds"], rows)
    return {"checks": {}, "rows": len(rows), "all_pass": all(r[2] == "pass" for r in rows), "outputs": ["summary.csv"]}


COMMANDS = {
    "synth-check": cmd_synth,
    "annealed": cmd_annealed,
    "quenched": cmd_quenched,
    "chi": cmd_chi,
    "corrector": cmd_corrector,
    "moment-cross": cmd_moment_cross,
    "llt": cmd_llt,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    schema = load_schema()
    parser = argparse.ArgumentParser(prog="kraichnan-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, sections in SECTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int, help="master seed (overrides run.master_seed)")
        p.add_argument("--workers", type=int, help="worker processes (default: $KRAICHNAN_WORKERS or run.workers)")
        p.add_argument("--out-dir", type=Path, default=Path("runs"))
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any schema key")
        p.add_argument("--strict", action="store_true", help="exit with status 5 when a check fails")
        if name == "llt":
            p.add_argument("--ladder", type=int, help="number of dyadic ladder points")
        for section in ("model", "grid", "time", "run", *sections):
            for key in schema[section]:
                flag = "--" + key.replace("_", "-")
                if name == "llt" and key == "ladder_points":
                    continue
                meta = schema[section][key].type.upper()
                try:
                    p.add_argument(flag, dest=f"ov__{section}__{key}", metavar=meta)
                except argparse.ArgumentError:
                    # same key in two sections: the later one gets a section prefix
                    p.add_argument(f"--{section}-{key}".replace("_", "-"), dest=f"ov__{section}__{key}", metavar=meta)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        overrides = list(args.set)
        for k, v in vars(args).items():
            if k.startswith("ov__") and v is not None:
                _, section, key = k.split("__")
                overrides.append(f"{section}.{key}={v}")
        if args.seed is not None:
            overrides.append(f"run.master_seed={args.seed}")
        if getattr(args, "ladder", None) is not None:
            overrides.append(f"llt.ladder_points={args.ladder}")
        cfg = load_config(args.config, overrides)
        workers = args.workers or int(os.environ.get("KRAICHNAN_WORKERS", 0)) or cfg["run"]["workers"]
        out = args.out_dir / args.command
        out.mkdir(parents=True, exist_ok=True)
        if args.command != "report":
            from .fieldsynth import check_resolution

            g = cfg["grid"]
            check_resolution(cfg.spec(), cfg.grid(), g["min_box_support_ratio"], g["min_points_per_corr_length"])
        result = COMMANDS[args.command](cfg, out, workers)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except InsufficientReplicas as exc:
        print(f"insufficient replicas: {exc}", file=sys.stderr)
        return EXIT_REPLICAS
    except ConfigurationError as exc:
        print(f"resolution/stability error: {exc}", file=sys.stderr)
        return EXIT_RESOLUTION
    manifest = {
        "subcommand": args.command,
        "version": __version__,
        "master_seed": cfg["run"]["master_seed"],
        "workers": workers,
        "config": cfg.snapshot(),
        "config_source": cfg.source,
        "result": result,
        "wall_seconds": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    checks = result.get("checks", {})
    for name, ok in checks.items():
        print(f"{args.command}: {name}: {'pass' if ok else 'FAIL'}")
    if args.strict and not all(checks.values()):
        return EXIT_CHECK
    return EXIT_OK


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def main(argv=None) -> None:
    try:
        code = run(argv)
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_ERROR
    sys.exit(code)


if __name__ == "__main__":
    main()
