"""Command line entry point: ``parn <subcommand> [options]``.

Exit status is 0 on success, 1 when an acceptance threshold of the preset
fails, and 2 for usage or input errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import analysis, harness
from .clock_motion import C
from .las_solver import MODE1, MODE2, GeometryError, SolverInput, Theta, gauss_newton_solve
from .scenario import (
    ScenarioError,
    load_scenario,
    read_trace,
    reference_scene,
    scenario_to_dict,
    simulate,
    write_scenario,
    write_trace,
)
from .virtual_sync import carn_track, track_anchor

OUT_ENV = "PARN_OUT_DIR"
DEFAULT_OUT = "parn_out"

log = logging.getLogger("parn")


def out_dir(args) -> Path:
    """``--out`` wins, then ``$PARN_OUT_DIR``, then ``./parn_out``."""
    path = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _scenario(args):
    if args.scenario:
        return load_scenario(args.scenario)
    if args.preset:
        return harness.load_preset(args.preset).scenario
    return reference_scene()


def _seed(args, sc):
    return sc.seed if args.seed is None else args.seed


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _summary(sc, seed, **extra):
    d = {"seed": seed, "config_hash": harness.config_hash(scenario_to_dict(sc))}
    d.update(extra)
    return d


def _vec(text):
    return np.array([float(x) for x in text.split(",")])


# ---------------------------------------------------------------- trace helpers

def _trace_or_simulate(args, sc, seed):
    if getattr(args, "trace", None):
        return read_trace(args.trace)
    epochs = simulate(sc, args.epochs, seed=seed)
    path = out_dir(args) / "trace.csv"
    write_trace(epochs, path)
    return read_trace(path)


def sync_estimates(rows, sc, carn=False) -> list:
    """Per (epoch, device, secondary anchor) offsets at the response instants."""
    p1 = sc.anchor(1).position
    epochs = sorted({r["epoch"] for r in rows})
    index = {e: k for k, e in enumerate(epochs)}
    n = len(epochs)
    devices = sorted({r["device"] for r in rows if r["kind"] == "response"})
    out = []
    for aid in sc.san_ids:
        a = sc.anchor(aid)
        d_i1 = float(np.linalg.norm(a.position - p1))
        taus = np.full(n, np.nan)
        t_loc = np.full(n, np.nan)
        for r in rows:
            if r["kind"] == "sync_san" and r["node_id"] == aid:
                taus[index[r["epoch"]]] = r["value_seconds"]
                t_loc[index[r["epoch"]]] = r["rx_local_seconds"]
        for dev in devices:
            target = np.full(n, np.nan)
            for r in rows:
                if r["kind"] == "response" and r["device"] == dev and r["node_id"] == aid:
                    target[index[r["epoch"]]] = r["rx_local_seconds"]
            if carn:
                tr = carn_track(taus, d_i1, a.noise_sigma, aid)
            else:
                filled = np.where(np.isfinite(target), target, t_loc)
                tr = track_anchor(taus, t_loc, filled, d_i1, a.noise_sigma, sc.clock_noise, aid)
            for k, e in enumerate(epochs):
                out.append({"epoch": e, "device": dev, "anchor_id": aid, "b_hat_seconds": tr.b_hat[k],
                            "sigma_b_sq_seconds2": tr.sigma_b_sq[k], "method": "carn" if carn else "parn"})
    out.sort(key=lambda r: (r["epoch"], r["device"], r["anchor_id"]))
    return out


SYNC_COLUMNS = ["epoch", "device", "anchor_id", "b_hat_seconds", "sigma_b_sq_seconds2", "method"]


def write_sync_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SYNC_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["device"], r["anchor_id"], repr(float(r["b_hat_seconds"])),
                        repr(float(r["sigma_b_sq_seconds2"])), r["method"]])


def read_sync_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"epoch": int(r["epoch"]), "device": int(r["device"]), "anchor_id": int(r["anchor_id"]),
                 "b_hat_seconds": float(r["b_hat_seconds"]),
                 "sigma_b_sq_seconds2": float(r["sigma_b_sq_seconds2"]), "method": r["method"]}
                for r in csv.DictReader(fh)]


def solve_trace(rows, sync_rows, sc, mode) -> list:
    """Per-epoch solutions; epochs with missing inputs are reported unconverged."""
    dim = sc.dimension
    m = len(sc.anchors)
    meas = defaultdict(dict)
    ud = {}
    for r in rows:
        key = (r["epoch"], r["device"])
        if r["kind"] == "response":
            meas[key][r["node_id"]] = r["value_seconds"]
        elif r["kind"] == "sync_ud":
            ud[key] = r
    sync = defaultdict(dict)
    for r in sync_rows:
        sync[(r["epoch"], r["device"])][r["anchor_id"]] = (r["b_hat_seconds"], r["sigma_b_sq_seconds2"])
    out = []
    for key in sorted(meas):
        rho = [meas[key].get(i, np.nan) for i in range(1, m + 1)]
        est = [sync[key].get(i, (np.nan, np.nan)) for i in range(2, m + 1)]
        row = {"epoch": key[0], "device": key[1]}
        try:
            if not np.all(np.isfinite(rho)) or not np.all(np.isfinite(est)):
                raise GeometryError("missing measurement or sync estimate")
            kw = {}
            if mode == MODE1:
                u = ud[key]
                vel = [u["ud_vx"], u["ud_vy"], u["ud_vz"]][:dim]
                kw = dict(ud_sync_toa=u["value_seconds"], sigma_u=sc.devices[0].noise_sigma,
                          known_velocity=vel, known_drift=u["ud_drift"],
                          response_delay=u["response_delay_seconds"])
            inp = SolverInput(sc.anchor_positions, rho, [e[0] for e in est], [e[1] for e in est],
                              sc.anchor_sigmas, mode=mode, **kw)
            sol = gauss_newton_solve(inp)
            p = sol.theta.p_u
            row.update(zip("xyz", p))
            row.update(cb_u_meters=sol.theta.cb_u, iterations=sol.iterations,
                       converged=int(sol.converged), residual=sol.final_residual_norm)
        except (GeometryError, ValueError) as exc:
            log.debug("epoch %s: %s", key, exc)
            row.update(dict(zip("xyz", [np.nan] * dim)))
            row.update(cb_u_meters=np.nan, iterations=0, converged=0, residual=np.nan)
        out.append(row)
    return out


def write_solution_csv(rows, path, dim):
    cols = ["epoch", "device", *"xyz"[:dim], "cb_u_meters", "iterations", "converged", "residual"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["epoch"], r["device"], *(repr(float(r[c])) for c in "xyz"[:dim]),
                        repr(float(r["cb_u_meters"])), r["iterations"], r["converged"], repr(float(r["residual"]))])


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args):
    sc = _scenario(args)
    seed = _seed(args, sc)
    n = sc.epoch_count if args.epochs is None else args.epochs
    epochs = simulate(sc, n, seed=seed)
    out = out_dir(args)
    write_trace(epochs, out / "trace.csv")
    write_scenario(sc, out / "scenario.yaml")
    _write_json(out / "simulate.json", _summary(sc, seed, epochs=n, trace="trace.csv"))
    print(f"wrote {n} epochs to {out / 'trace.csv'}")
    return 0


def cmd_sync(args):
    sc = _scenario(args)
    seed = _seed(args, sc)
    rows = _trace_or_simulate(args, sc, seed)
    est = sync_estimates(rows, sc, carn=args.carn)
    out = out_dir(args)
    write_sync_csv(est, out / "sync.csv")
    _write_json(out / "sync.json", _summary(sc, seed, method="carn" if args.carn else "parn", rows=len(est)))
    print(f"wrote {len(est)} offset estimates to {out / 'sync.csv'}")
    return 0


def cmd_solve(args):
    sc = _scenario(args)
    seed = _seed(args, sc)
    rows = _trace_or_simulate(args, sc, seed)
    sync_rows = read_sync_csv(args.sync) if args.sync else sync_estimates(rows, sc, carn=args.carn)
    sol = solve_trace(rows, sync_rows, sc, args.mode)
    out = out_dir(args)
    write_solution_csv(sol, out / "solution.csv", sc.dimension)
    ok = sum(r["converged"] for r in sol)
    _write_json(out / "solve.json", _summary(sc, seed, mode=args.mode, epochs=len(sol), converged=ok))
    print(f"solved {ok}/{len(sol)} epochs -> {out / 'solution.csv'}")
    return 0


def _pose(args, sc):
    p = _vec(args.position) if args.position else sc.anchor_positions.mean(axis=0)
    v = _vec(args.velocity) if args.velocity else np.zeros(sc.dimension)
    if p.shape != (sc.dimension,) or v.shape != (sc.dimension,):
        raise ScenarioError(f"position and velocity need {sc.dimension} components")
    return p, v


def _analytic_input(sc, p, v, mode, delay=None, known_velocity=None, drift=0.0):
    """Noise-free measurements for a device at ``p`` and filter-free secondary clocks."""
    dev = sc.devices[0]
    delay = dev.response_delay if delay is None else delay
    sigma_u = dev.noise_sigma
    m = len(sc.anchors)
    dist = np.linalg.norm(sc.anchor_positions - p, axis=1)
    kw = {}
    if mode == MODE1:
        kw = dict(ud_sync_toa=float(np.linalg.norm(sc.anchor(1).position - p + v * delay) / C - drift * delay),
                  sigma_u=sigma_u, known_velocity=v if known_velocity is None else known_velocity,
                  known_drift=drift, response_delay=delay)
    return SolverInput(sc.anchor_positions, dist / C, np.zeros(m - 1), np.zeros(m - 1),
                       sc.anchor_sigmas, mode=mode, **kw)


def cmd_crlb(args):
    sc = _scenario(args)
    p, v = _pose(args, sc)
    theta = Theta(p, args.offset * C)
    names = [*"xyz"[: sc.dimension], "cb_u"]
    out = out_dir(args)
    reports = {mode: analysis.fim(theta, _analytic_input(sc, p, v, mode)) for mode in (MODE1, MODE2)}
    with open(out / "crlb.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "parameter", "crlb_m2", "bound_m"])
        for mode, rep in reports.items():
            for name, val in zip(names, rep.crlb_diag):
                w.writerow([mode, name, repr(float(val)), repr(float(np.sqrt(val)))])
    cmp = analysis.compare_modes(reports[MODE1], reports[MODE2])
    _write_json(out / "crlb.json", _summary(sc, _seed(args, sc), position=p.tolist(),
                                            mode_ordering=bool(cmp.ordered), gaps_m2=cmp.gaps.tolist()))
    print(f"mode 1 / mode 2 position bound: {reports[MODE1].position_bound:.4g} / "
          f"{reports[MODE2].position_bound:.4g} m -> {out / 'crlb.csv'}")
    return 0


DEVIATION_COLUMNS = ["kind", "deviation", "delay_s", "bias_norm_sq_m2", "variance_trace_m2", "rmse_m",
                     "position_mse_m2", "clock_mse_m2", "simplified_bias_norm_sq_m2"]


def cmd_deviate(args):
    sc = _scenario(args)
    p, v = _pose(args, sc)
    kind, values, delays = args.kind, args.values, args.delays
    if args.preset:
        spec = harness.load_preset(args.preset).spec
        if spec is None or spec.variable not in ("velocity_deviation", "drift_deviation"):
            raise ScenarioError(f"preset {args.preset} is not a deviation sweep")
        kind = "velocity" if spec.variable == "velocity_deviation" else "drift"
        values, delays = list(spec.values), list(spec.delays)
    values = values or ([0, 4, 8, 12, 16, 20] if kind == "velocity" else [0, 1e-7, 2e-7, 3e-7, 4e-7, 5e-7])
    delays = delays or [sc.devices[0].response_delay]
    # default: along the line of sight to the primary anchor, the worst case
    direction = _vec(args.direction) if args.direction else sc.anchor(1).position - p
    direction = direction / np.linalg.norm(direction)
    theta = Theta(p, args.offset * C)
    out = out_dir(args)
    with open(out / "deviation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEVIATION_COLUMNS)
        for delay in delays:
            for val in values:
                if kind == "velocity":
                    inp = _analytic_input(sc, p, v, MODE1, delay, known_velocity=v + val * direction)
                    rep = analysis.velocity_deviation_report(theta, inp, v)
                else:
                    inp = _analytic_input(sc, p, v, MODE1, delay)
                    rep = analysis.drift_deviation_report(theta, inp, val)
                w.writerow([kind, repr(float(val)), repr(float(delay)), repr(rep.bias_norm_sq),
                            repr(rep.variance_trace), repr(rep.rmse), repr(rep.position_mse),
                            repr(rep.clock_mse), repr(float(rep.simplified_bias_norm_sq))])
    _write_json(out / "deviation.json", _summary(sc, _seed(args, sc), kind=kind, values=list(map(float, values)),
                                                 delays=list(map(float, delays)), position=p.tolist()))
    print(f"wrote {len(values) * len(delays)} deviation reports to {out / 'deviation.csv'}")
    return 0


def cmd_montecarlo(args):
    if not args.preset:
        raise ScenarioError("montecarlo needs --preset (a shipped name or a preset file)")
    preset = harness.load_preset(args.preset)
    sc = load_scenario(args.scenario) if args.scenario else None
    result, checks = harness.run_preset(preset, seed=args.seed, trials=args.trials, scenario=sc,
                                        workers=args.workers)
    out = out_dir(args)
    summary = harness.emit_results(result, out, checks, preset=preset.name, stem=preset.name)
    if isinstance(result, harness.KalmanResult):
        _write_kalman_track(result, out / f"{preset.name}_track.csv")
    for c in checks:
        tag = "PASS" if c.passed else ("N/A " if not c.applicable else "FAIL")
        print(f"[{tag}] {c.name}: {c.detail}")
    return 0 if summary["passed"] else 1


def _write_kalman_track(res, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["anchor_id", "step", "time_s", "true_offset_s", "filtered_offset_s", "posterior_std_s",
                    "raw_offset_s"])
        for j, aid in enumerate(res.anchor_ids):
            for k in range(res.times.shape[1]):
                w.writerow([aid, k, repr(res.times[j, k]), repr(res.truth[j, k]), repr(res.estimate[j, k]),
                            repr(float(np.sqrt(res.post_var[j, k]))), repr(res.raw[j, k])])


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario YAML file (default: reference scene)")
    common.add_argument("--preset", help=f"preset name ({', '.join(harness.PRESETS)}) or preset file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--trials", type=int, help="Monte Carlo trials per sweep point")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="parn", description="PARN localization and synchronization lab")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize a measurement trace")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sync", parents=[common], help="estimate secondary-anchor clock offsets")
    s.add_argument("--trace", help="trace CSV (default: simulate one)")
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--carn", action="store_true", help="single-shot offsets instead of the Kalman filter")
    s.set_defaults(func=cmd_sync)

    s = sub.add_parser("solve", parents=[common], help="localize and synchronize the device per epoch")
    s.add_argument("--trace")
    s.add_argument("--sync", help="offset estimates CSV from `parn sync`")
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--mode", type=int, choices=(MODE1, MODE2), default=MODE2)
    s.add_argument("--carn", action="store_true")
    s.set_defaults(func=cmd_solve)

    for name, func, helptext in (("crlb", cmd_crlb, "Cramer-Rao bounds of both modes"),
                                 ("deviate", cmd_deviate, "analytic bias/RMSE under wrong velocity or drift")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--position", help="device position, comma separated (default: anchor centroid)")
        s.add_argument("--velocity", help="device velocity, comma separated (default: zero)")
        s.add_argument("--offset", type=float, default=0.0, help="device clock offset, seconds")
        s.set_defaults(func=func)
        if name == "deviate":
            s.add_argument("--kind", choices=("velocity", "drift"), default="velocity")
            s.add_argument("--values", type=float, nargs="+")
            s.add_argument("--delays", type=float, nargs="+")
            s.add_argument("--direction", help="velocity deviation direction (default: toward the primary anchor)")

    s = sub.add_parser("montecarlo", parents=[common], help="run a figure preset and check its thresholds")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_montecarlo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, GeometryError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"parn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
