"""Command-line entry point: ``gencoords {simulate,least-action,filter,linear-analysis,defaults}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from . import config as cfgmod
from .csvio import columns, read_csv, write_csv, write_manifest
from .errors import ConfigError, GenCoordsError
from .integrators import euler_baseline, zigzag_trajectory
from .least_action import LagrangianContext, regularized_descent
from .linear import LinearModel, convergence_radius, inf_norm, linear_cov, linear_mean
from .noise import build_gen_cov
from .scenarios import filter_run, rms_error

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


def _grid(dt: float, T: float) -> np.ndarray:
    n = int(round(T / dt))
    return np.arange(n + 1) * dt


def cmd_simulate(cfg: dict, out: Path, allow_blowup: bool = False) -> int:
    model = cfgmod.build_model(cfg)
    kernel = cfgmod.build_kernel(cfg["kernel"])
    t = _grid(cfg["dt"], cfg["T"])
    d = model.state_dim
    files, blowups = [], {}
    stack = np.full((cfg["ensemble"], t.size, d), np.nan)
    stride = int(round(cfg["dt"] / cfg["euler_dt"]))
    for i in range(cfg["ensemble"]):
        seed = cfg["seed"] + i
        if cfg["method"] == "euler":
            tr = euler_baseline(model, cfg["z"], kernel.sigma, cfg["euler_dt"], cfg["T"], seed,
                                noise_scale=np.sqrt(kernel.scale), bound=cfg["blowup_bound"])
            times, states = tr.times[::stride], tr.states[::stride]
        else:
            mode = "exact" if cfg["method"] == "zigzag" else "linear"
            try:
                tr = zigzag_trajectory(model, cfg["z"], kernel, cfg["N"], t, mode, seed, cfg["blowup_bound"])
            except FloatingPointError:
                tr = None
            times, states = (t[:0], np.zeros((0, d))) if tr is None else (tr.times, tr.states)
        if tr is None or tr.blew_up:
            blowups[i] = None if tr is None else tr.blowup_time
        stack[i, : len(times)] = states
        name = f"trajectory_{i:04d}.csv"
        write_csv(out / name, ["t"] + columns("x", d), np.column_stack([times, states]) if len(times) else [])
        files.append(name)
    alive = np.isfinite(stack[:, :, 0])
    count = alive.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = _masked_mean(stack, alive)
        var = _masked_var(stack, alive, mean)
    write_csv(out / "summary.csv", ["t"] + columns("mean", d) + columns("var", d) + ["count"],
              np.column_stack([t, mean, var, count]))
    files.append("summary.csv")
    write_manifest(out, "simulate", cfg, files, {"blowups": {str(k): v for k, v in sorted(blowups.items())}})
    if blowups and not allow_blowup:
        print(f"error: {len(blowups)} trajectories blew up (use --allow-blowup to accept)", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _masked_mean(stack, alive):
    s = np.where(alive[..., None], stack, 0.0).sum(axis=0)
    c = alive.sum(axis=0)[:, None]
    return np.where(c > 0, s / np.maximum(c, 1), np.nan)


def _masked_var(stack, alive, mean):
    dev = np.where(alive[..., None], stack - mean[None], 0.0)
    c = alive.sum(axis=0)[:, None]
    return np.where(c > 0, (dev ** 2).sum(axis=0) / np.maximum(c, 1), np.nan)


def reference_path(model, z, times) -> np.ndarray:
    """Noise-free path: matrix exponential for linear models, a tight ODE solve otherwise."""
    if model.builtin == "linear":
        A = np.asarray(model.params["A"], dtype=float)
        return np.array([expm(A * s) @ np.asarray(z, dtype=float) for s in times])
    sol = solve_ivp(lambda _, x: model.f(x), (times[0], times[-1]), z, t_eval=times, rtol=1e-10, atol=1e-12, method="DOP853")
    out = np.full((len(times), model.state_dim), np.nan)
    out[: sol.y.shape[1]] = sol.y.T
    return out


def cmd_least_action(cfg: dict, out: Path, allow_blowup: bool = False) -> int:
    model = cfgmod.build_model(cfg)
    kernel = cfgmod.build_kernel(cfg["kernel"]).with_base_dim(model.state_dim)
    ctx = LagrangianContext(model, build_gen_cov(kernel, cfg["N"]), cfg["mode"])
    d = model.state_dim
    files, report = [], {}
    status = EXIT_OK
    for lam in cfg["lambdas"]:
        traj, trace = regularized_descent(ctx, cfg["z"], float(lam), cfg["dt"], cfg["T"])
        k = slice(None, None, cfg["output_every"])
        t, x, L = traj.times[k], traj.states[k], trace[k]
        ref = reference_path(model, cfg["z"], t) if len(t) > 1 else np.asarray([cfg["z"]], dtype=float)
        err = np.sqrt(np.sum((x - ref) ** 2, axis=1))
        name = f"least_action_lambda_{lam:g}.csv"
        write_csv(out / name, ["t"] + columns("x", d) + ["lagrangian"] + columns("ref", d) + ["err"],
                  np.column_stack([t, x, L, ref, err]))
        files.append(name)
        report[f"{lam:g}"] = {"sup_err": float(np.max(np.abs(x - ref))), "blowup_time": traj.blowup_time}
        if traj.blew_up and not allow_blowup:
            status = EXIT_RUN
    write_manifest(out, "least-action", cfg, files, {"report": report})
    return status


def cmd_filter(cfg: dict, out: Path, allow_blowup: bool = False) -> int:
    data = None
    if not cfg["synthetic"]:
        header, rows = read_csv(cfg["data_path"])
        ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
        xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
        if not ycols:
            raise ConfigError("data_path", "observation file needs y_1..y_m columns")
        data = (rows[:, 0], rows[:, ycols], rows[:, xcols] if xcols else None)
    run = filter_run(cfg, data)
    d = run.mu0.shape[1]
    header = ["t"] + columns("mu0", d) + ["free_energy"]
    body = [run.times, run.mu0, run.free_energy]
    if run.truth is not None:
        header.append("rmse")
        body.append(rms_error(run.mu0, run.truth))
    write_csv(out / "filter.csv", header, np.column_stack(body))
    report = {
        "complete": run.complete,
        "rmse": run.rmse(),
        "baseline_rmse": run.baseline_rmse(),
        "chosen_order": run.chosen_order,
        "integrated_free_energy": None if run.order_scores is None else {str(k): v for k, v in sorted(run.order_scores.items())},
    }
    Path(out, "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "filter", cfg, ["filter.csv", "report.json"])
    if not run.complete and not allow_blowup:
        print("error: filter diverged before the last observation", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def cmd_linear_analysis(cfg: dict, out: Path, allow_blowup: bool = False) -> int:
    model = cfgmod.build_model(cfg)
    A = np.asarray(model.params["A"], dtype=float)
    lm = LinearModel(A, cfg["z"], cfgmod.build_kernel(cfg["kernel"]))
    d = lm.dim
    t = _grid(cfg["dt"], cfg["T"])
    pairs = [(i, i) for i in range(d)] + [(i, j) for i in range(d) for j in range(i + 1, d)]
    rows = []
    for s in t:
        C = linear_cov(lm, cfg["N"], s, s)
        rows.append([s, *linear_mean(lm, cfg["N"], s), *(C[i, j] for i, j in pairs)])
    header = ["t"] + columns("mean", d) + [f"var_{i + 1}{j + 1}" for i, j in pairs]
    write_csv(out / "linear_analysis.csv", header, rows)
    lam = max(1.0, inf_norm(A), inf_norm(A.T))
    report = {"R": cfg["R"], "lambda": lam, "convergence_radius": convergence_radius(A, cfg["R"])}
    Path(out, "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "linear-analysis", cfg, ["linear_analysis.csv", "report.json"])
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "least-action": cmd_least_action,
    "filter": cmd_filter,
    "linear-analysis": cmd_linear_analysis,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gencoords", description="Stochastic dynamics in generalised coordinates")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults used when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--allow-blowup", action="store_true", help="exit 0 even if trajectories blow up")
    d = sub.add_parser("defaults", help="print the default configuration of every command as JSON")
    d.add_argument("--out", help="write to this file instead of stdout")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        text = json.dumps({"commands": cfgmod.DEFAULTS, "scenarios": cfgmod.SCENARIO_DEFAULTS}, indent=2, sort_keys=True) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    try:
        user = cfgmod.load(args.config) if args.config else {}
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed", "must be non-negative")
            user["seed"] = args.seed
        cfg = cfgmod.resolve(args.command, user)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, out, args.allow_blowup)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GenCoordsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
