"""Command-line front end: ``scns simulate|diagnose|stationarity|sweep``.

Exit codes: 0 success, 1 validation error, 2 solver failure,
3 hard-invariant failure (positivity or symmetry) recorded for the run.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_config, with_axis
from .diagnostics import (
    RENORM_LINEAR,
    RENORM_ZLOGZ,
    WindowError,
    density_lower_bound,
    effective_viscous_flux_report,
    energy_balance_residual,
    ergodic_velocity_average,
    gained_integrability,
    korn_poincare_ratio,
    korn_poincare_sweep,
    mass_ode_residual,
    renorm_continuity_residual,
    total_energy,
)
from .dynamics import SingularMass, SolverFailure, simulate
from .model import ParameterError, solve_M_epsilon
from .spectral import symmetry_defect, vector_symmetry_defect
from .stationarity import functionals_by_name, ramp_ensemble, stationarity_report
from .storage import atomic_write, load_record, report_csv, save_record

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_INVARIANT = 0, 1, 2, 3
DIAGNOSTICS = ("energy", "mass", "renorm", "evf", "korn", "lower-bound", "ergodic")


# ---------------------------------------------------------------- runs


def run_member(cfg: RunConfig, member: int, T: float | None = None):
    """Simulate one ensemble member from the configured initial data."""
    T = cfg.T if T is None else T
    return simulate(
        cfg.initial_state(),
        T,
        cfg.params,
        cfg.noise_model(),
        cfg.stepper,
        cfg.seed,
        member=member,
        stride=cfg.stride,
    )


def _run_job(args):
    cfg, member, T = args
    return run_member(cfg, member, T)


def run_ensemble(cfg: RunConfig, members, T: float, jobs: int = 1) -> list:
    tasks = [(cfg, m, T) for m in members]
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, tasks))


def check_invariants(record, symmetric: bool) -> dict:
    min_rho = min(float(s.rho_samples.min()) for s in record.states)
    out = {"positivity": min_rho > 0, "min_rho": min_rho}
    if symmetric:
        defect = max(symmetry_defect(s.rho, s.u) for s in record.states)
        out["symmetry"] = defect < 1e-10
        out["symmetry_defect"] = defect
    return out


def _manifest(cfg: RunConfig, command: str, seeds, files, started: float, **extra) -> str:
    body = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.config_hash,
        "seeds": [int(s) for s in seeds],
        "wall_clock_s": round(time.time() - started, 3),
        "files": sorted(files),
        "config": cfg.text,
        **extra,
    }
    return json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def write_run(cfg: RunConfig, record, out: Path, command: str, started: float) -> dict:
    files = save_record(record, out, cfg.snapshot_every)
    inv = check_invariants(record, cfg.stepper.symmetric)
    atomic_write(out / "config.ini", cfg.text)
    files.append("config.ini")
    atomic_write(
        out / "manifest.json",
        _manifest(cfg, command, [cfg.seed], files, started, invariants=inv, retries=record.retries),
    )
    return inv


def _out_dir(cfg: RunConfig, out) -> Path:
    return Path(out if out is not None else cfg.out)


# ---------------------------------------------------------------- commands


def cmd_simulate(config_path, out=None, jobs: int = 1) -> int:
    started = time.time()
    cfg = load_config(config_path)
    out = _out_dir(cfg, out)
    record = run_member(cfg, 0)
    inv = write_run(cfg, record, out, "simulate", started)
    _say(f"simulate: {len(record)} samples written to {out}")
    if not inv["positivity"] or not inv.get("symmetry", True):
        return EXIT_INVARIANT
    return EXIT_OK


def _load_run(run_dir: Path):
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"missing {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        cfg = parse_config(manifest["config"], str(manifest["seeds"][0]))
    except (ValueError, KeyError, IndexError) as exc:
        raise FileNotFoundError(f"corrupt manifest {mpath}: {exc}") from None
    record = load_record(
        run_dir,
        cfg.noise_model(),
        cfg.stepper.dt,
        cfg.stride,
        cfg.snapshot_every,
        cfg.seed,
        cfg.params.level,
        cfg.params,
        cfg.stepper.symmetric,
    )
    return cfg, manifest, record


def _diagnose_one(which: str, cfg: RunConfig, record, level: str, alpha: float):
    """Rows ``(term, value)`` and a one-line summary for one diagnostic."""
    if which == "energy":
        rep = energy_balance_residual(record)
        rows = list(rep.terms.items()) + [("residual", rep.residual)]
        return rows, f"energy balance residual {rep.residual:.6e} over {rep.window}"
    if which == "mass":
        res = mass_ode_residual(record)
        bound = 10.0 * record.dt
        rows = [("residual", res), ("dt", record.dt), ("bound_10dt", bound), ("within_bound", res < bound)]
        return rows, f"mass ODE residual {res:.3e} (bound 10 dt = {bound:.3e})"
    if which == "renorm":
        rows = []
        for b in (RENORM_LINEAR, RENORM_ZLOGZ):
            rep = renorm_continuity_residual(record, b)
            rows += [(f"{b.name}:{k}", v) for k, v in rep.terms.items()]
            rows.append((f"{b.name}:residual", rep.residual))
        return rows, "renormalised continuity residuals for b = z and b = z log z"
    if which == "evf":
        rep = effective_viscous_flux_report(record, level=level, alpha=alpha)
        return list(rep.rows()), f"flux identity residual {rep.residual:.6e} ({rep.level} level)"
    if which == "korn":
        rng = np.random.default_rng([cfg.seed, 7])
        ratios = korn_poincare_sweep(record.grid, cfg.params, rng, count=100)
        rows = [("count", len(ratios)), ("min_ratio", float(ratios.min())), ("median_ratio", float(np.median(ratios)))]
        u = record.states[-1].u
        if np.any(u.samples) and vector_symmetry_defect(u) < 1e-10:
            rows.append(("final_state_ratio", korn_poincare_ratio(u, cfg.params)))
        return rows, f"Korn-Poincare constant (empirical min) {ratios.min():.6f}"
    if which == "lower-bound":
        t0 = min(cfg.lower_bound_from, float(record.times[-1]))
        rep = density_lower_bound(record, t0)
        rows = [
            ("from_time", t0), ("min_rho", rep.min_rho), ("bound", rep.bound),
            ("divergence_max", rep.divergence), ("ratio", rep.ratio), ("M_eps", rep.mass_equilibrium),
        ]
        return rows, f"density floor {rep.min_rho:.6e} vs comparison bound {rep.bound:.6e}"
    if which == "ergodic":
        span = float(record.times[-1] - record.times[0])
        if span <= 0:
            raise WindowError("ergodic average needs more than one sample")
        avg, partial = ergodic_velocity_average(record, span)
        rows = [("T", span), ("average", avg), ("partial_max", float(partial.max()))]
        return rows, f"ergodic W12 average {avg:.6e} over T = {span}"
    raise ConfigError("diagnose.which", f"which ∈ {{{', '.join(DIAGNOSTICS)}}}")


def cmd_diagnose(run_dir, which=DIAGNOSTICS, level: str | None = None, alpha: float | None = None) -> int:
    cfg, manifest, record = _load_run(run_dir)
    level = level or cfg.evf_level
    alpha = cfg.evf_alpha if alpha is None else alpha
    if level == "delta" and not (0 < alpha < 1 / 3):
        raise ConfigError("diagnose.alpha", "α ∈ (0, 1/3)")
    out = Path(run_dir) / "reports"
    summary = []
    for w in which:
        rows, line = _diagnose_one(w, cfg, record, level, alpha)
        atomic_write(out / f"{w}.csv", report_csv(rows))
        atomic_write(out / f"{w}.txt", line + "\n")
        summary.append(f"{w}: {line}")
    text = "\n".join(summary) + "\n"
    atomic_write(out / "summary.txt", text)
    _say(text.rstrip())
    inv = manifest.get("invariants", {})
    if not inv.get("positivity", True) or not inv.get("symmetry", True):
        return EXIT_INVARIANT
    return EXIT_OK


def _stationarity_horizon(cfg: RunConfig) -> float:
    sample_dt = cfg.stepper.dt * cfg.stride
    h = max(cfg.times) + max(cfg.taus) + (1.0 / cfg.mollifier_m if cfg.mollifier_m else 0.0)
    return math.ceil(h / sample_dt - 1e-9) * sample_dt


def cmd_stationarity(config_path, out=None, jobs: int = 1) -> int:
    started = time.time()
    cfg = load_config(config_path)
    out = _out_dir(cfg, out)
    horizon = _stationarity_horizon(cfg)
    members = list(range(cfg.ensemble))
    if cfg.surrogate == "ramp":
        ensemble = ramp_ensemble(cfg.grid, cfg.params, cfg.ensemble, horizon, cfg.stepper.dt * cfg.stride)
    else:
        ensemble = run_ensemble(cfg, members, horizon, jobs)
    funcs = functionals_by_name(cfg.functionals, cfg.params)
    rep = stationarity_report(
        ensemble, cfg.taus, cfg.times, funcs, alpha=cfg.alpha, m=cfg.mollifier_m or None,
        burn_in=cfg.burn_in, min_samples=cfg.min_samples, threshold=cfg.threshold,
    )
    if cfg.surrogate == "ramp":
        rep.notes.append("negative control: ramp surrogate")
    atomic_write(out / "stationarity.csv", rep.to_csv())
    atomic_write(out / "stationarity.txt", rep.summary())
    atomic_write(
        out / "manifest.json",
        _manifest(cfg, "stationarity", [cfg.seed], ["stationarity.csv", "stationarity.txt"], started,
                  members=members, verdict=rep.verdict, horizon=horizon),
    )
    _say(rep.summary().rstrip())
    return EXIT_OK


def tail_fraction(state) -> float:
    """Share of the velocity L2 energy on the outermost Galerkin shell."""
    g = state.grid
    shell = (np.max(np.abs(g.mode_index), axis=0) == g.N)[..., : g.n // 2 + 1]
    e = g.rweight * np.sum(np.abs(state.u_hat) ** 2, axis=0)
    total = float(e.sum())
    return float(e[shell].sum()) / total if total > 0 else 0.0


def sweep_row(cfg: RunConfig, record, axis: str, value: float) -> dict:
    times = record.times
    start = min(cfg.burn_in, float(times[-1]))
    sel = [s for t, s in zip(times, record.states) if t >= start - 1e-12]
    en = np.array([total_energy(s, cfg.params) for s in sel])
    press = np.mean([gained_integrability(s, cfg.params, 1.0)["pressure"] for s in sel])
    p = cfg.params
    Meps = solve_M_epsilon(p.eps, p.M0) if p.eps > 0 and p.zero_level else float("nan")
    return {
        "axis": axis,
        "value": float(value),
        "M_eps": Meps,
        "energy_q05": float(np.quantile(en, 0.05)),
        "energy_q50": float(np.quantile(en, 0.5)),
        "energy_q95": float(np.quantile(en, 0.95)),
        "pressure_functional": float(press),
        "min_rho": float(min(s.rho_samples.min() for s in sel)),
        "tail_fraction": float(np.mean([tail_fraction(s) for s in sel])),
        "mass_final": float(sel[-1].mass),
        "samples": len(sel),
    }


SWEEP_COLUMNS = (
    "axis", "value", "M_eps", "energy_q05", "energy_q50", "energy_q95",
    "pressure_functional", "min_rho", "tail_fraction", "mass_final", "samples",
)


def _sweep_cell(args):
    cfg, axis, value = args
    cell = with_axis(cfg, axis, value)
    return cell, run_member(cell, 0)


def cmd_sweep(config_path, out=None, jobs: int = 1, axis: str | None = None, values=None) -> int:
    started = time.time()
    cfg = load_config(config_path)
    out = _out_dir(cfg, out)
    axis = axis or cfg.sweep_axis
    values = tuple(values) if values is not None else cfg.sweep_values
    if not values:
        raise ConfigError("sweep.values", "at least one value required")
    for v in values:  # validate every cell before any compute
        with_axis(cfg, axis, v)
    tasks = [(cfg, axis, v) for v in values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, tasks))
    else:
        results = [_sweep_cell(t) for t in tasks]
    rows = []
    files = []
    for i, ((cell, record), v) in enumerate(zip(results, values)):
        cell_dir = out / f"cell_{i:02d}"
        write_run(cell, record, cell_dir, "sweep", started)
        files.append(str(Path(f"cell_{i:02d}") / "manifest.json"))
        rows.append(sweep_row(cell, record, axis, v))
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in SWEEP_COLUMNS))
    atomic_write(out / "sweep.csv", "\n".join(lines) + "\n")
    text = "\n".join(
        f"{axis}={r['value']:g}: M_eps={r['M_eps']:.6g} energy median={r['energy_q50']:.6g} "
        f"min_rho={r['min_rho']:.4g} tail={r['tail_fraction']:.3e}"
        for r in rows
    )
    atomic_write(out / "sweep.txt", text + "\n")
    atomic_write(out / "manifest.json", _manifest(cfg, "sweep", [cfg.seed], files + ["sweep.csv", "sweep.txt"], started))
    _say(text)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _say(msg: str):
    print(msg)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scns", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="INI configuration file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")

    common(sub.add_parser("simulate", help="run one trajectory"))
    d = sub.add_parser("diagnose", help="audit a finished run")
    common(d, config_required=False)
    d.add_argument("--run", default=None, help="run directory (defaults to --out or the config's out)")
    d.add_argument("--which", default=",".join(DIAGNOSTICS), help="comma-separated diagnostics")
    d.add_argument("--level", choices=("epsilon", "delta"), default=None)
    d.add_argument("--alpha", type=float, default=None)
    common(sub.add_parser("stationarity", help="ensemble stationarity report"))
    s = sub.add_parser("sweep", help="parameter sweep")
    common(s)
    s.add_argument("--axis", choices=("epsilon", "delta", "N", "R"), default=None)
    s.add_argument("--values", default=None, help="comma-separated axis values")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out, args.jobs)
        if args.command == "diagnose":
            run = args.run or args.out
            if run is None:
                if args.config is None:
                    raise ConfigError("--run", "a run directory or a config is required")
                run = load_config(args.config).out
            which = tuple(w.strip() for w in args.which.split(",") if w.strip())
            for w in which:
                if w not in DIAGNOSTICS:
                    raise ConfigError("--which", f"which ∈ {{{', '.join(DIAGNOSTICS)}}}")
            return cmd_diagnose(run, which, args.level, args.alpha)
        if args.command == "stationarity":
            return cmd_stationarity(args.config, args.out, args.jobs)
        if args.command == "sweep":
            values = None
            if args.values is not None:
                try:
                    values = tuple(float(v) for v in args.values.split(",") if v.strip())
                except ValueError:
                    raise ConfigError("--values", "comma-separated numbers") from None
            return cmd_sweep(args.config, args.out, args.jobs, args.axis, values)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverFailure, SingularMass) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (FileNotFoundError, WindowError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
