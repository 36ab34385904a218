"""Monte Carlo experiments, figure presets and result files.

A sweep is split into *network runs*: one continuous simulation of the
anchor clocks and their filters per (noise level, response delay). Every
epoch after a burn-in is one trial with a freshly drawn device. Sweep values
that only change the solver input (velocity or drift deviation) reuse the
run, so all points of such a sweep see the same devices.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .clock_motion import C, clock_trajectory
from .las_solver import MODE1, MODE2, batch_initial_theta, batch_rows, solve_batch
from .scenario import (
    Scenario,
    load_scenario,
    reference_scene,
    scenario_from_dict,
    scenario_to_dict,
    simulate,
)
from .virtual_sync import track_anchor

SWEEP_VARIABLES = ("measurement_noise", "velocity_deviation", "drift_deviation", "delay")
SYNC_METHODS = ("parn", "carn")
NOMINAL_SIGMA_M = 0.05  # weighting used for noise-free points

DEFAULT_THRESHOLDS = {
    "crlb_rel_tol": 0.05,
    "analytic_rel_tol": 0.10,
    "linearity_r2": 0.99,
    "bias_dominance": 3.0,
    "min_linear_points": 3,
    "steady_prior_m": 0.0073,
    "steady_prior_rel_tol": 0.15,
    "error_std_rel_tol": 0.20,
    "coverage_3sigma": 0.99,
}

RESULT_COLUMNS = ["variable", "value", "delay_s", "mode", "sync", "metric", "metric_value"]


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    trials: int = 2000
    modes: tuple = (MODE1, MODE2)
    syncs: tuple = ("parn",)
    seed: int = 0
    delays: tuple = (0.005,)
    noise_sigma_m: float = 0.05
    burn_in: int = 500
    sync_period: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "delays", tuple(float(v) for v in self.delays))
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        object.__setattr__(self, "syncs", tuple(str(s) for s in self.syncs))
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"unknown sweep variable {self.variable!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.burn_in < 2:
            raise ValueError("burn_in must cover the two filter-initialization epochs")
        if not self.modes or any(m not in (MODE1, MODE2) for m in self.modes):
            raise ValueError(f"modes must be drawn from (1, 2), got {self.modes}")
        if not self.syncs or any(s not in SYNC_METHODS for s in self.syncs):
            raise ValueError(f"syncs must be drawn from {SYNC_METHODS}, got {self.syncs}")
        if self.variable == "measurement_noise" and any(v < 0 for v in self.values):
            raise ValueError("noise levels must be nonnegative")
        if self.variable == "delay" and any(v <= 0 for v in self.values):
            raise ValueError("delays must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("values", "delays", "modes", "syncs"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class SweepPoint:
    variable: str
    value: float
    delay_s: float
    mode: int
    sync: str
    trials: int
    converged: int
    convergence_rate: float
    position_rmse: float
    clock_rmse: float
    crlb_position: float  # sqrt of mean trace of the position block
    crlb_clock: float
    analytic_position_rmse: float  # includes the deviation bias
    analytic_clock_rmse: float
    mc_bias: float  # sqrt(MSE - mean tr(CRLB)) over the full parameter
    analytic_bias: float
    noise_floor: float  # sqrt(mean tr(CRLB))

    KEYS = ("variable", "value", "delay_s", "mode", "sync")


@dataclass(eq=False)
class TrialRecords:
    """Per-trial arrays behind one sweep point."""

    estimates: np.ndarray  # (T, N+1), NaN rows for failures
    truths: np.ndarray
    status: np.ndarray
    iterations: np.ndarray
    crlb: np.ndarray  # (T, N+1, N+1)
    bias: np.ndarray  # analytic bias (T, N+1)

    @property
    def ok(self):
        return self.status == 0


@dataclass(eq=False)
class SweepResult:
    spec: SweepSpec
    points: list
    records: dict = field(default_factory=dict, repr=False)
    config_hash: str = ""

    def tidy_rows(self) -> list:
        return tidy_point_rows(self.points)


@dataclass(frozen=True)
class Check:
    """One acceptance threshold. A check whose regime is empty for the chosen
    grid is reported with ``applicable=False`` and does not count as failed."""

    name: str
    passed: bool
    detail: str
    applicable: bool = True

    @property
    def failed(self):
        return self.applicable and not self.passed


# ---------------------------------------------------------------- helpers

def config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def group_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _unit_vectors(rng, count, dim):
    if dim == 2:
        a = rng.uniform(0.0, 2.0 * math.pi, count)
        return np.column_stack([np.cos(a), np.sin(a)])
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(eq=False)
class _RunData:
    anchors: np.ndarray
    sigmas: np.ndarray
    sigma_u: float
    delay: float
    rho: np.ndarray
    tau_u: np.ndarray
    p_tx: np.ndarray
    velocity: np.ndarray
    offset_u: np.ndarray
    drift_u: np.ndarray
    sync: dict  # method -> (b_check, var)
    directions: np.ndarray


def _network_run(scenario: Scenario, trials, burn_in, seed, noise_free, syncs) -> _RunData:
    n_epochs = burn_in + trials
    epochs = simulate(scenario, n_epochs, seed=seed, clock_noise=not noise_free,
                      measurement_noise=not noise_free)
    ids = [a.id for a in sorted(scenario.anchors, key=lambda a: a.id)]
    p1 = scenario.anchor(1).position
    resp = [ep.responses[0] for ep in epochs]
    sync = {}
    n_san = len(ids) - 1
    for method in syncs:
        sync[method] = (np.empty((n_epochs, n_san)), np.empty((n_epochs, n_san)))
    for j, aid in enumerate(ids[1:]):
        a = scenario.anchor(aid)
        d_i1 = float(np.linalg.norm(a.position - p1))
        taus = np.array([ep.san_sync_toas.get(aid, np.nan) for ep in epochs])
        t_loc = np.array([ep.san_sync_rx_local.get(aid, np.nan) for ep in epochs])
        target = np.array([r.response_rx_local[aid] for r in resp])
        if "parn" in syncs:
            tr = track_anchor(taus, t_loc, target, d_i1, a.noise_sigma, scenario.clock_noise, aid)
            sync["parn"][0][:, j] = tr.b_hat
            sync["parn"][1][:, j] = tr.sigma_b_sq
        if "carn" in syncs:
            sync["carn"][0][:, j] = taus - d_i1 / C
            sync["carn"][1][:, j] = np.where(np.isfinite(taus), a.noise_sigma**2, np.nan)
    keep = slice(burn_in, None)
    resp = resp[burn_in:]
    dev = scenario.devices[0]
    return _RunData(
        anchors=scenario.anchor_positions,
        sigmas=scenario.anchor_sigmas,
        sigma_u=dev.noise_sigma,
        delay=dev.response_delay,
        rho=np.array([[r.response_toas[i] for i in ids] for r in resp]),
        tau_u=np.array([r.ud_sync_toa for r in resp]),
        p_tx=np.array([r.truth.position_at_tx for r in resp]),
        velocity=np.array([r.truth.velocity for r in resp]),
        offset_u=np.array([r.truth.clock.offset_b for r in resp]),
        drift_u=np.array([r.truth.clock.drift_omega for r in resp]),
        sync={k: (b[keep], v[keep]) for k, (b, v) in sync.items()},
        directions=_unit_vectors(np.random.default_rng([seed, 3]), trials, scenario.dimension),
    )


def _solve_point(run: _RunData, mode, method, velocity_dev=0.0, drift_dev=0.0) -> TrialRecords:
    b_check, var = run.sync[method]
    known_v = run.velocity + velocity_dev * run.directions
    known_w = run.drift_u + drift_dev
    anchors, offsets, signs, w, meas = batch_rows(
        run.anchors, run.rho, b_check, var, run.sigmas, mode,
        tau_u=run.tau_u, sigma_u=run.sigma_u, known_velocity=known_v, known_drift=known_w,
        delay=run.delay,
    )
    bad_input = ~np.all(np.isfinite(meas) & np.isfinite(offsets) & np.isfinite(w), axis=1)
    offsets = np.where(bad_input[:, None], 0.0, offsets)
    meas = np.where(bad_input[:, None], 0.0, meas)
    w = np.where(bad_input[:, None], 1.0, w)
    theta0 = batch_initial_theta(run.anchors, np.where(np.isfinite(run.rho), run.rho, 0.0))
    theta, _, iters, _, status = solve_batch(anchors, offsets, signs, w, meas, theta0)
    status = np.where(bad_input, -1, status)
    theta[status != 0] = np.nan
    truths = np.column_stack([run.p_tx, C * run.offset_u])
    g, crlb = analysis.batch_crlb(anchors, signs, w, run.p_tx)
    if mode == MODE1:
        # measurement minus model of the sync row at the truth
        p1 = run.anchors[0]
        d_true = np.linalg.norm(p1 - run.p_tx + run.velocity * run.delay, axis=1)
        d_used = np.linalg.norm(p1 - run.p_tx + known_v * run.delay, axis=1)
        r_last = d_true - d_used + C * drift_dev * run.delay
        bias = analysis.batch_last_row_bias(g, w, crlb, r_last)
    else:
        bias = np.zeros_like(truths)
    return TrialRecords(theta, truths, status, iters, crlb, bias)


def aggregate(records: TrialRecords, keys: dict) -> SweepPoint:
    ok = records.ok
    n_ok = int(ok.sum())
    m = analysis.rmse_metrics(records.estimates[ok], records.truths[ok])
    cov = records.crlb[ok]
    bias = records.bias[ok]
    if n_ok:
        tr_pos = np.trace(cov[:, :-1, :-1], axis1=1, axis2=2)
        var_clk = cov[:, -1, -1]
        b_pos = np.sum(bias[:, :-1] ** 2, axis=1)
        b_clk = bias[:, -1] ** 2
        err = records.estimates[ok] - records.truths[ok]
        mse = float(np.mean(np.sum(err**2, axis=1)))
        floor = float(np.mean(tr_pos + var_clk))
        vals = dict(
            crlb_position=math.sqrt(np.mean(tr_pos)),
            crlb_clock=math.sqrt(np.mean(var_clk)),
            analytic_position_rmse=math.sqrt(np.mean(b_pos + tr_pos)),
            analytic_clock_rmse=math.sqrt(np.mean(b_clk + var_clk)),
            mc_bias=math.sqrt(max(mse - floor, 0.0)),
            analytic_bias=math.sqrt(np.mean(b_pos + b_clk)),
            noise_floor=math.sqrt(floor),
        )
    else:
        vals = dict.fromkeys(("crlb_position", "crlb_clock", "analytic_position_rmse",
                              "analytic_clock_rmse", "mc_bias", "analytic_bias", "noise_floor"), math.nan)
    n = len(ok)
    return SweepPoint(
        **keys, trials=n, converged=n_ok, convergence_rate=n_ok / n if n else math.nan,
        position_rmse=m.position_rmse, clock_rmse=m.clock_rmse, **vals,
    )


def _groups(spec: SweepSpec):
    """(noise sigma m, delay s, sweep values handled by the run)."""
    if spec.variable == "measurement_noise":
        return [(v, d, (v,)) for v in spec.values for d in spec.delays]
    if spec.variable == "delay":
        return [(spec.noise_sigma_m, v, (v,)) for v in spec.values]
    return [(spec.noise_sigma_m, d, spec.values) for d in spec.delays]


def _run_group(args):
    spec, scenario, gidx, sigma_m, delay, values = args
    noise_free = sigma_m == 0.0
    sc = scenario.with_noise(NOMINAL_SIGMA_M if noise_free else sigma_m).with_delay(delay)
    if spec.sync_period is not None:
        sc = replace(sc, sync_period=spec.sync_period)
    run = _network_run(sc, spec.trials, spec.burn_in, group_seed(spec.seed, gidx), noise_free, spec.syncs)
    out = []
    for value in values:
        vdev = value if spec.variable == "velocity_deviation" else 0.0
        wdev = value if spec.variable == "drift_deviation" else 0.0
        for mode in spec.modes:
            for method in spec.syncs:
                rec = _solve_point(run, mode, method, vdev, wdev)
                keys = dict(variable=spec.variable, value=value, delay_s=delay, mode=mode, sync=method)
                out.append((keys, rec))
    return out


def run_monte_carlo(spec: SweepSpec, scenario: Scenario | None = None, workers: int = 1) -> SweepResult:
    """Run every sweep point; results do not depend on ``workers``."""
    scenario = reference_scene() if scenario is None else scenario
    tasks = [(spec, scenario, g, s, d, vals) for g, (s, d, vals) in enumerate(_groups(spec))]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
            chunks = list(ex.map(_run_group, tasks))
    else:
        chunks = [_run_group(t) for t in tasks]
    points, records = [], {}
    for chunk in chunks:
        for keys, rec in chunk:
            points.append(aggregate(rec, keys))
            records[tuple(keys.values())] = rec
    points.sort(key=lambda p: (p.value, p.delay_s, p.mode, SYNC_METHODS.index(p.sync)))
    payload = {"spec": spec.to_dict(), "scenario": scenario_to_dict(scenario)}
    return SweepResult(spec, points, records, config_hash(payload))


# ---------------------------------------------------------------- clock tracking

@dataclass(eq=False)
class KalmanResult:
    anchor_ids: list
    times: np.ndarray  # true sync reception instants per anchor (n_san, n)
    truth: np.ndarray  # b_i at those instants
    estimate: np.ndarray  # filtered offsets
    post_var: np.ndarray
    prior_var: np.ndarray
    raw: np.ndarray  # tau_i - d_i1 / c
    burn_in: int
    seed: int
    config_hash: str = ""

    def _steady(self):
        return slice(self.burn_in, None)

    @property
    def steady_prior_m(self) -> np.ndarray:
        return C * np.sqrt(np.median(self.prior_var[:, self._steady()], axis=1))

    @property
    def predicted_std_m(self) -> np.ndarray:
        return C * np.sqrt(np.mean(self.post_var[:, self._steady()], axis=1))

    @property
    def error_std_m(self) -> np.ndarray:
        err = (self.estimate - self.truth)[:, self._steady()]
        return C * np.std(err, axis=1)

    @property
    def raw_std_m(self) -> np.ndarray:
        return C * np.std((self.raw - self.truth)[:, self._steady()], axis=1)

    @property
    def coverage_3sigma(self) -> np.ndarray:
        s = self._steady()
        err = np.abs(self.estimate - self.truth)[:, s]
        return np.mean(err <= 3.0 * np.sqrt(self.post_var[:, s]), axis=1)

    def tidy_rows(self) -> list:
        rows = []
        metrics = {
            "steady_prior_m": self.steady_prior_m,
            "predicted_std_m": self.predicted_std_m,
            "error_std_m": self.error_std_m,
            "raw_std_m": self.raw_std_m,
            "coverage_3sigma": self.coverage_3sigma,
        }
        for j, aid in enumerate(self.anchor_ids):
            for name, arr in metrics.items():
                rows.append(dict(variable="clock_tracking", value=float(aid), delay_s=math.nan,
                                 mode=0, sync="parn", metric=name, metric_value=float(arr[j])))
        return rows


def run_kalman_experiment(scenario: Scenario | None = None, duration: float = 100.0,
                          noise_sigma_m: float = 0.05, burn_in_s: float = 10.0, seed: int = 0) -> KalmanResult:
    """Track every secondary anchor clock over ``duration`` seconds of sync signals."""
    scenario = reference_scene() if scenario is None else scenario
    period = scenario.sync_period
    n = int(round(duration / period))
    sigma = noise_sigma_m / C
    p1 = scenario.anchor(1).position
    ids = scenario.san_ids
    shape = (len(ids), n)
    times, truth, est, post, prior, raw = (np.empty(shape) for _ in range(6))
    for j, aid in enumerate(ids):
        a = scenario.anchor(aid)
        d = float(np.linalg.norm(a.position - p1))
        t = np.arange(n) * period + d / C
        walk = np.random.default_rng([seed, 4, aid])
        b = clock_trajectory(a.clock, t, scenario.clock_noise, walk)[:, 0]
        tau = d / C + b + sigma * np.random.default_rng([seed, 5, aid]).standard_normal(n)
        t_loc = t + b
        tr = track_anchor(tau, t_loc, t_loc, d, sigma, scenario.clock_noise, aid, max_gap=math.inf)
        times[j], truth[j], raw[j] = t, b, tau - d / C
        est[j] = tr.x_post[:, 0]
        post[j] = tr.p_post[:, 0]
        prior[j] = tr.prior_var
    burn = int(round(burn_in_s / period))
    payload = {"experiment": "clock_tracking", "duration": duration, "noise_sigma_m": noise_sigma_m,
               "burn_in_s": burn_in_s, "seed": seed, "scenario": scenario_to_dict(scenario)}
    return KalmanResult(ids, times, truth, est, post, prior, raw, burn, seed, config_hash(payload))


@dataclass(frozen=True)
class DiagnosticsResult:
    """Sample stds of the trace transforms for a stationary device (meters, or 1 for drift)."""

    detrended_mode1_m: float
    detrended_mode2_m: float
    differential_raw: float  # per second, SAN offset series
    differential_filtered: float
    drift_raw: float
    drift_smoothed: float
    drift_raw_expected: float  # sqrt(2) sigma_u / period


def stationary_scene(sigma_m: float = 0.03, position=(80.0, 120.0)) -> Scenario:
    """Reference anchors with a parked device whose clock keeps running between epochs."""
    from .clock_motion import ClockState
    from .scenario import DeviceConfig

    base = reference_scene(sigma_m=sigma_m)
    dev = DeviceConfig(id=1, response_delay=0.005, noise_sigma=sigma_m / C, motion="constant_velocity",
                       position=tuple(position), clock="continuous",
                       initial_clock=ClockState(3e-4, 4e-6), clock_random_walk=True)
    return replace(base, devices=(dev,))


def run_diagnostics(scenario: Scenario | None = None, epochs: int = 3000, burn_in: int = 500,
                    seed: int = 0) -> DiagnosticsResult:
    """Apply the de-trending, differential and rough-drift transforms to a simulated trace."""
    sc = stationary_scene() if scenario is None else scenario
    run = _network_run(sc, epochs, burn_in, seed, False, ("parn",))
    p1 = sc.anchor(1).position
    dist = np.linalg.norm(p1 - run.p_tx, axis=1)
    detr = {}
    for mode in (MODE1, MODE2):
        rec = _solve_point(run, mode, "parn")
        cb = rec.estimates[:, -1]
        detr[mode] = float(np.nanstd(analysis.detrend_clock(run.rho[:, 0], cb / C, dist)))
    # one secondary anchor's sync-TOA series, raw against filtered
    aid = sc.san_ids[0]
    a = sc.anchor(aid)
    d_i1 = float(np.linalg.norm(a.position - p1))
    eps = simulate(sc, burn_in + epochs, seed=seed)
    taus = np.array([ep.san_sync_toas[aid] for ep in eps])
    t_loc = np.array([ep.san_sync_rx_local[aid] for ep in eps])
    tr = track_anchor(taus, t_loc, t_loc, d_i1, a.noise_sigma, sc.clock_noise, aid)
    keep = slice(burn_in, None)
    raw_diff = analysis.differential_series(taus[keep], t_loc[keep])
    filt_diff = analysis.differential_series(tr.x_post[keep, 0], t_loc[keep])
    # device sync-TOAs against its transmission timestamps
    t_tx = np.arange(burn_in + epochs)[keep] * sc.sync_period + run.delay
    rough = analysis.rough_drift_estimate(run.tau_u, t_tx)
    smooth = analysis.rough_drift_estimate(run.tau_u, t_tx, smooth=True, sigma_u=run.sigma_u,
                                           noise=sc.clock_noise)
    tail = slice(burn_in, None)
    return DiagnosticsResult(
        detr[MODE1], detr[MODE2],
        float(np.std(raw_diff)), float(np.std(filt_diff)),
        float(np.std(rough)), float(np.std(smooth[tail])),
        float(np.sqrt(2.0) * run.sigma_u / sc.sync_period),
    )


# ---------------------------------------------------------------- acceptance

def _r_squared(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    a = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    ss_res = float(np.sum((y - a @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan


def _rel(a, b):
    return abs(a / b - 1.0)


def evaluate(result, thresholds: dict | None = None) -> list:
    """Pass/fail checks appropriate to the experiment."""
    th = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    if isinstance(result, KalmanResult):
        return _evaluate_kalman(result, th)
    spec = result.spec
    pts = result.points
    checks = []
    by_key = {(p.value, p.delay_s, p.mode, p.sync): p for p in pts}
    if spec.variable in ("measurement_noise", "delay"):
        noisy = [p for p in pts if p.sync == "parn" and not (spec.variable == "measurement_noise" and p.value == 0)]
        if noisy:
            worst = max(max(_rel(p.position_rmse, p.crlb_position), _rel(p.clock_rmse, p.crlb_clock)) for p in noisy)
            checks.append(Check("crlb_attainment", worst <= th["crlb_rel_tol"],
                                f"worst relative RMSE/CRLB gap {worst:.4f} (limit {th['crlb_rel_tol']})"))
        if MODE1 in spec.modes and MODE2 in spec.modes:
            bad = []
            for (v, d, mode, s), p in by_key.items():
                if mode != MODE1 or (spec.variable == "measurement_noise" and v == 0):
                    continue
                q = by_key[(v, d, MODE2, s)]
                if not (p.position_rmse < q.position_rmse and p.clock_rmse < q.clock_rmse
                        and p.crlb_position < q.crlb_position and p.crlb_clock < q.crlb_clock):
                    bad.append((v, d, s))
            checks.append(Check("mode1_below_mode2", not bad, f"violations at {bad}" if bad else "all points"))
        if "parn" in spec.syncs and "carn" in spec.syncs:
            bad = []
            for (v, d, mode, s), p in by_key.items():
                if s != "parn" or (spec.variable == "measurement_noise" and v == 0):
                    continue
                q = by_key[(v, d, mode, "carn")]
                if not (p.position_rmse < q.position_rmse and p.clock_rmse < q.clock_rmse):
                    bad.append((v, d, mode))
            checks.append(Check("parn_below_carn", not bad, f"violations at {bad}" if bad else "all points"))
    else:
        dev = [p for p in pts if p.mode == MODE1 and p.sync == "parn"]
        if dev:
            worst = max(max(_rel(p.position_rmse, p.analytic_position_rmse),
                            _rel(p.clock_rmse, p.analytic_clock_rmse)) for p in dev)
            checks.append(Check("analytic_rmse_match", worst <= th["analytic_rel_tol"],
                                f"worst relative MC/analytic gap {worst:.4f} (limit {th['analytic_rel_tol']})"))
            dom = [p for p in dev if p.analytic_bias > th["bias_dominance"] * p.noise_floor]
            if len(dom) >= th["min_linear_points"]:
                r2 = _r_squared([p.delay_s * p.value for p in dom], [p.mc_bias for p in dom])
                checks.append(Check("bias_linearity", r2 > th["linearity_r2"],
                                    f"R^2 {r2:.5f} over {len(dom)} bias-dominated points (limit {th['linearity_r2']})"))
            else:
                ratio = max(p.analytic_bias / p.noise_floor for p in dev)
                above = [p for p in dev if p.analytic_bias > p.noise_floor]
                extra = ""
                if len(above) >= th["min_linear_points"]:
                    r2 = _r_squared([p.delay_s * p.value for p in above], [p.mc_bias for p in above])
                    extra = f"; for reference R^2 {r2:.5f} over {len(above)} points with bias above the noise floor"
                checks.append(Check(
                    "bias_linearity", False,
                    f"regime empty: {len(dom)} points with bias > {th['bias_dominance']:g}x noise floor "
                    f"(max ratio {ratio:.3f}){extra}",
                    applicable=False,
                ))
    return checks


def _evaluate_kalman(res: KalmanResult, th) -> list:
    prior = float(np.mean(res.steady_prior_m))
    gap = _rel(prior, th["steady_prior_m"])
    ratio = res.error_std_m / res.predicted_std_m
    cov = float(np.min(res.coverage_3sigma))
    return [
        Check("steady_state_prior", gap <= th["steady_prior_rel_tol"],
              f"c*sqrt(P_prior) {prior * 100:.4f} cm vs {th['steady_prior_m'] * 100:.2f} cm"),
        Check("error_std_consistency", bool(np.all(np.abs(ratio - 1) <= th["error_std_rel_tol"])),
              "empirical/predicted std " + ", ".join(f"{r:.3f}" for r in ratio)),
        Check("three_sigma_coverage", cov >= th["coverage_3sigma"], f"min coverage {cov:.4f}"),
    ]


# ---------------------------------------------------------------- files

def tidy_point_rows(points) -> list:
    rows = []
    metric_names = [f.name for f in fields(SweepPoint) if f.name not in SweepPoint.KEYS]
    for p in points:
        for name in metric_names:
            rows.append(dict(variable=p.variable, value=p.value, delay_s=p.delay_s, mode=p.mode,
                             sync=p.sync, metric=name, metric_value=float(getattr(p, name))))
    return rows


def _fmt(x):
    return repr(float(x))


def write_results_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r["variable"], _fmt(r["value"]), _fmt(r["delay_s"]), int(r["mode"]), r["sync"],
                        r["metric"], _fmt(r["metric_value"])])


def read_results(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append(dict(variable=r["variable"], value=float(r["value"]), delay_s=float(r["delay_s"]),
                             mode=int(r["mode"]), sync=r["sync"], metric=r["metric"],
                             metric_value=float(r["metric_value"])))
    return rows


def points_from_rows(rows) -> list:
    """Rebuild SweepPoints from tidy rows."""
    grouped = {}
    for r in rows:
        key = tuple(r[k] for k in SweepPoint.KEYS)
        grouped.setdefault(key, {})[r["metric"]] = r["metric_value"]
    out = []
    for key, metrics in grouped.items():
        kw = dict(zip(SweepPoint.KEYS, key))
        kw.update(metrics)
        kw["trials"] = int(kw["trials"])
        kw["converged"] = int(kw["converged"])
        out.append(SweepPoint(**kw))
    return out


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def emit_results(result, out_dir, checks=None, preset: str | None = None, stem: str = "results") -> dict:
    """Write ``<stem>.csv`` (tidy, one row per point x metric) and ``<stem>.json``.

    Returns the summary dict. Nothing run-dependent besides the inputs goes
    into either file, so identical inputs give identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [] if result is None else result.tidy_rows()
    csv_path = out_dir / f"{stem}.csv"
    write_results_csv(rows, csv_path)
    checks = list(checks or [])
    if isinstance(result, SweepResult):
        seed, spec = result.spec.seed, result.spec.to_dict()
    elif isinstance(result, KalmanResult):
        seed, spec = result.seed, {"experiment": "clock_tracking"}
    else:
        seed, spec = None, None
    summary = {
        "preset": preset,
        "seed": seed,
        "config_hash": getattr(result, "config_hash", None),
        "spec": spec,
        "rows": len(rows),
        "checks": [{"name": c.name, "passed": bool(c.passed), "applicable": bool(c.applicable),
                    "detail": c.detail} for c in checks],
        "passed": not any(c.failed for c in checks),
        "csv": csv_path.name,
    }
    (out_dir / f"{stem}.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=_json_safe) + "\n", encoding="utf-8"
    )
    return summary


# ---------------------------------------------------------------- presets

PRESETS = ("fig4_noise_sweep", "fig5_carn", "fig6_7_velocity", "fig8_9_drift", "fig_kalman")


@dataclass(eq=False)
class Preset:
    name: str
    kind: str  # "sweep" or "kalman"
    scenario: Scenario
    spec: SweepSpec | None = None
    kalman: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)


def _scenario_entry(entry, base_dir=None) -> Scenario:
    if entry is None or entry == "reference":
        return reference_scene()
    if isinstance(entry, dict):
        return scenario_from_dict(entry)
    path = Path(entry)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return load_scenario(path)


def preset_from_dict(cfg: dict, base_dir=None) -> Preset:
    sc = _scenario_entry(cfg.get("scenario"), base_dir)
    kind = cfg.get("kind", "sweep")
    th = dict(cfg.get("thresholds", {}))
    if kind == "kalman":
        return Preset(cfg["name"], kind, sc, kalman=dict(cfg.get("kalman", {})), thresholds=th)
    if kind != "sweep":
        raise ValueError(f"unknown preset kind {kind!r}")
    return Preset(cfg["name"], kind, sc, spec=SweepSpec(**cfg["sweep"]), thresholds=th)


def load_preset(name_or_path) -> Preset:
    """Load a shipped preset by name, or a preset file by path."""
    if name_or_path in PRESETS:
        text = resources.files("parn.presets").joinpath(f"{name_or_path}.yaml").read_text(encoding="utf-8")
        return preset_from_dict(yaml.safe_load(text))
    path = Path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(f"no preset named {name_or_path!r} (known: {', '.join(PRESETS)})")
    return preset_from_dict(yaml.safe_load(path.read_text(encoding="utf-8")), base_dir=path.parent)


def run_preset(preset: Preset, seed: int | None = None, trials: int | None = None,
               scenario: Scenario | None = None, workers: int = 1):
    """Run a preset; returns ``(result, checks)``."""
    sc = preset.scenario if scenario is None else scenario
    if preset.kind == "kalman":
        kw = dict(preset.kalman)
        if seed is not None:
            kw["seed"] = seed
        result = run_kalman_experiment(sc, **kw)
    else:
        spec = preset.spec
        if seed is not None:
            spec = replace(spec, seed=seed)
        if trials is not None:
            spec = replace(spec, trials=trials)
        result = run_monte_carlo(spec, sc, workers=workers)
    return result, evaluate(result, preset.thresholds)


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
