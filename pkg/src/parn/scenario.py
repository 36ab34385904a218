"""Scenario definition and per-epoch synthesis of PARN TOA measurements.

One protocol period (epoch ``n``) runs as follows, in true (reference) time:

* the primary anchor (id 1) sends the sync signal at ``t_sync = n * period``;
* every secondary anchor timestamps it, giving the sync-TOA ``tau_i``;
* every device timestamps it (``tau_u``) and, ``response_delay`` later,
  transmits its response;
* every anchor timestamps the response, giving the response-TOA ``rho_i``.

Clock offsets are in seconds. The primary anchor's clock is the reference.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .clock_motion import (
    C,
    NO_CLOCK_NOISE,
    REFERENCE_CLOCK_NOISE,
    ClockNoiseParams,
    ClockState,
    propagate_clock,
)


class ScenarioError(ValueError):
    pass


class ScheduleError(ScenarioError):
    pass


@dataclass(frozen=True, eq=False)
class Anchor:
    id: int
    position: np.ndarray
    role: str = "secondary"
    clock: ClockState = ClockState(0.0, 0.0)
    noise_sigma: float = 0.05 / C  # s

    @property
    def is_primary(self):
        return self.role == "primary"


@dataclass(frozen=True)
class DeviceConfig:
    """How a user device behaves across epochs.

    ``motion`` is ``"random"`` (fresh position in a square region and a fresh
    heading every epoch, as in the 80 m box of the reference scene) or
    ``"constant_velocity"`` (``position + velocity * t``; zero velocity gives a
    stationary device). ``clock`` is ``"random"`` (offset and drift redrawn
    every epoch) or ``"continuous"`` (``initial_clock`` evolved over time,
    optionally as a random walk with the scenario clock noise).
    """

    id: int = 1
    response_delay: float = 0.005
    noise_sigma: float = 0.05 / C
    motion: str = "random"
    region_center: tuple = (100.0, 100.0)
    region_half_width: float = 40.0
    speed: float = 5.0
    position: tuple = (100.0, 100.0)
    velocity: tuple = (0.0, 0.0)
    clock: str = "random"
    offset_range: tuple = (-1.0, 1.0)
    drift_range: tuple = (-20e-6, 20e-6)
    initial_clock: ClockState = ClockState(0.0, 0.0)
    clock_random_walk: bool = False


@dataclass(frozen=True, eq=False)
class UserDeviceTruth:
    device_id: int
    position_at_tx: np.ndarray
    velocity: np.ndarray
    clock: ClockState  # at the response transmission instant
    noise_sigma: float
    response_delay: float

    @property
    def position_at_rx(self):
        return self.position_at_tx - self.velocity * self.response_delay

    @property
    def offset_at_rx(self):
        return self.clock.offset_b - self.clock.drift_omega * self.response_delay


@dataclass(frozen=True, eq=False)
class Scenario:
    anchors: tuple
    devices: tuple
    sync_period: float = 0.01
    dimension: int = 2
    clock_noise: ClockNoiseParams = REFERENCE_CLOCK_NOISE
    epoch_count: int = 10_000
    dropout_probability: float = 0.0
    guard: float = 0.0
    seed: int = 0

    def __post_init__(self):
        primaries = [a for a in self.anchors if a.is_primary]
        if len(primaries) != 1 or primaries[0].id != 1:
            raise ScenarioError("exactly one primary anchor, with id 1, is required")
        if primaries[0].clock != ClockState(0.0, 0.0):
            raise ScenarioError("the primary anchor clock is the reference and must be (0, 0)")
        ids = [a.id for a in self.anchors]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ScenarioError(f"anchor ids must be 1..M, got {ids}")
        if len(self.anchors) < self.dimension + 1:
            raise ScenarioError(
                f"need at least {self.dimension + 1} anchors in {self.dimension}D, got {len(self.anchors)}"
            )
        for a in self.anchors:
            if np.shape(a.position) != (self.dimension,):
                raise ScenarioError(f"anchor {a.id} position is not {self.dimension}-dimensional")
            if not a.noise_sigma > 0:
                raise ScenarioError(f"anchor {a.id} noise sigma must be positive")
        for d in self.devices:
            if not d.noise_sigma > 0:
                raise ScenarioError(f"device {d.id} noise sigma must be positive")
            if not 0 < d.response_delay:
                raise ScenarioError(f"device {d.id} response delay must be positive")

    @property
    def anchor_positions(self) -> np.ndarray:
        return np.array([a.position for a in sorted(self.anchors, key=lambda a: a.id)])

    @property
    def anchor_sigmas(self) -> np.ndarray:
        return np.array([a.noise_sigma for a in sorted(self.anchors, key=lambda a: a.id)])

    def anchor(self, anchor_id) -> Anchor:
        for a in self.anchors:
            if a.id == anchor_id:
                return a
        raise KeyError(f"no anchor with id {anchor_id}")

    @property
    def san_ids(self):
        return [a.id for a in sorted(self.anchors, key=lambda a: a.id) if not a.is_primary]

    def with_noise(self, sigma_m: float) -> "Scenario":
        """Copy with every anchor and device noise set to ``sigma_m`` meters."""
        s = sigma_m / C
        return replace(
            self,
            anchors=tuple(replace(a, noise_sigma=s) for a in self.anchors),
            devices=tuple(replace(d, noise_sigma=s) for d in self.devices),
        )

    def with_delay(self, delay: float) -> "Scenario":
        return replace(self, devices=tuple(replace(d, response_delay=delay) for d in self.devices))


@dataclass
class DeviceResponse:
    device_id: int
    ud_sync_toa: float  # tau_u
    ud_sync_rx_local: float
    response_toas: dict  # anchor id -> rho_i
    response_rx_local: dict  # anchor id -> local reception timestamp
    truth: UserDeviceTruth
    t_tx: float  # true transmission instant
    anchor_offsets_at_tx: dict  # anchor id -> b_i(t_tx)


@dataclass
class EpochMeasurements:
    epoch_index: int
    t_sync: float
    san_sync_toas: dict  # anchor id -> tau_i; lost measurements are absent
    san_sync_rx_local: dict  # anchor id -> local timestamp
    san_offsets_at_rx: dict  # truth: anchor id -> b_i(t_rx)
    responses: list = field(default_factory=list)
    clocks_next: dict = field(default_factory=dict)  # anchor clocks at the next sync instant

    # single-device shorthands
    @property
    def ud_sync_toa(self):
        return self.responses[0].ud_sync_toa

    @property
    def response_toas(self):
        return self.responses[0].response_toas


@dataclass(frozen=True)
class ScheduleReport:
    ok: bool
    conflict: tuple | None = None
    reason: str = ""

    def __bool__(self):
        return self.ok


def pairwise_distance(scenario: Scenario, i: int, j: int) -> float:
    return float(np.linalg.norm(scenario.anchor(i).position - scenario.anchor(j).position))


def check_schedule(scenario: Scenario, guard: float | None = None) -> ScheduleReport:
    """Check that device response windows are disjoint inside one period."""
    guard = scenario.guard if guard is None else guard
    windows = sorted(
        (d.response_delay - guard, d.response_delay + guard, d.id) for d in scenario.devices
    )
    for lo, hi, dev in windows:
        if hi >= scenario.sync_period or lo < 0:
            return ScheduleReport(False, (dev,), f"device {dev} window leaves the sync period")
    for (lo1, hi1, d1), (lo2, hi2, d2) in zip(windows, windows[1:]):
        if lo2 <= hi1:
            return ScheduleReport(False, (d1, d2), f"devices {d1} and {d2} overlap")
    return ScheduleReport(True)


def _random_unit(rng, dim):
    if dim == 2:
        a = rng.uniform(0.0, 2.0 * math.pi)
        return np.array([math.cos(a), math.sin(a)])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def draw_device_truth(
    cfg: DeviceConfig, scenario: Scenario, epoch_index: int, rng: np.random.Generator
) -> UserDeviceTruth:
    """Device state at its response transmission instant in ``epoch_index``."""
    dim = scenario.dimension
    t_nominal = epoch_index * scenario.sync_period + cfg.response_delay
    if cfg.motion == "random":
        center = np.asarray(cfg.region_center, dtype=float)
        pos = center + rng.uniform(-cfg.region_half_width, cfg.region_half_width, dim)
        vel = cfg.speed * _random_unit(rng, dim)
    elif cfg.motion == "constant_velocity":
        vel = np.asarray(cfg.velocity, dtype=float)
        pos = np.asarray(cfg.position, dtype=float) + vel * t_nominal
    else:
        raise ScenarioError(f"unknown motion kind {cfg.motion!r}")

    if cfg.clock == "random":
        clock = ClockState(rng.uniform(*cfg.offset_range), rng.uniform(*cfg.drift_range))
    elif cfg.clock == "continuous":
        # deterministic part only; random-walk devices are handled by the simulator
        clock = propagate_clock(cfg.initial_clock, t_nominal, NO_CLOCK_NOISE)
    else:
        raise ScenarioError(f"unknown clock kind {cfg.clock!r}")
    return UserDeviceTruth(cfg.id, pos, vel, clock, cfg.noise_sigma, cfg.response_delay)


def synthesize_epoch(
    scenario: Scenario,
    epoch_index: int,
    rng: np.random.Generator,
    *,
    anchor_clocks: dict | None = None,
    device_truths: list | None = None,
    network_rng: np.random.Generator | None = None,
    clock_noise: bool = True,
    measurement_noise: bool = True,
) -> EpochMeasurements:
    """Synthesize every TOA of one protocol period.

    ``anchor_clocks`` maps anchor id to its clock at ``t_sync`` (defaults to the
    scenario's anchor clocks). Anchor clocks are propagated as random walks
    through the sync reception and response transmission instants using
    ``network_rng`` (defaults to ``rng``); the states reached at the next sync
    instant are returned in ``clocks_next``. Sync-TOA noise and dropouts also
    come from ``network_rng``; device draws and response noise from ``rng``.
    The two flags switch off clock random walks and TOA noise respectively
    (random draws are still consumed so realizations stay aligned).
    """
    report = check_schedule(scenario, guard=0.0)
    if not report.ok:
        raise ScheduleError(report.reason)
    network_rng = rng if network_rng is None else network_rng
    walk_rng = network_rng if clock_noise else None
    gain = 1.0 if measurement_noise else 0.0
    noise = scenario.clock_noise
    period = scenario.sync_period
    t_sync = epoch_index * period
    p1 = scenario.anchor(1).position
    if anchor_clocks is None:
        anchor_clocks = {a.id: a.clock for a in scenario.anchors}
    if device_truths is None:
        device_truths = [draw_device_truth(d, scenario, epoch_index, rng) for d in scenario.devices]

    # event instants per device
    events = []
    for truth in device_truths:
        t_rx_u = t_sync + np.linalg.norm(p1 - truth.position_at_rx) / C
        events.append((t_rx_u, t_rx_u + truth.response_delay, truth))

    san_tau, san_local, san_truth = {}, {}, {}
    tx_offsets = [dict() for _ in events]
    clocks_next = {}
    order = sorted(range(len(events)), key=lambda k: events[k][1])
    for a in sorted(scenario.anchors, key=lambda a: a.id):
        if a.is_primary:
            clocks_next[a.id] = a.clock
            for k in range(len(events)):
                tx_offsets[k][a.id] = 0.0
            continue
        d_i1 = np.linalg.norm(a.position - p1)
        t_rx = t_sync + d_i1 / C
        state = propagate_clock(anchor_clocks[a.id], t_rx - t_sync, noise, walk_rng)
        san_truth[a.id] = state.offset_b
        eps = network_rng.standard_normal() * a.noise_sigma * gain
        lost = scenario.dropout_probability > 0 and network_rng.random() < scenario.dropout_probability
        if not lost:
            san_tau[a.id] = d_i1 / C + state.offset_b + eps
            san_local[a.id] = t_rx + state.offset_b
        t_prev = t_rx
        for k in order:
            t_tx = events[k][1]
            if t_tx < t_prev:
                raise ScheduleError("response transmitted before sync reception")
            state = propagate_clock(state, t_tx - t_prev, noise, walk_rng)
            tx_offsets[k][a.id] = state.offset_b
            t_prev = t_tx
        t_next = t_sync + period
        if t_next < t_prev:
            raise ScheduleError("response transmitted after the next sync signal")
        clocks_next[a.id] = propagate_clock(state, t_next - t_prev, noise, walk_rng)

    responses = []
    for k, (t_rx_u, t_tx, truth) in enumerate(events):
        b_u = truth.clock.offset_b
        tau_u = (
            np.linalg.norm(p1 - truth.position_at_rx) / C
            + truth.offset_at_rx
            + rng.standard_normal() * truth.noise_sigma * gain
        )
        rho, rho_local = {}, {}
        for a in sorted(scenario.anchors, key=lambda a: a.id):
            prop = np.linalg.norm(a.position - truth.position_at_tx) / C
            eps = rng.standard_normal() * a.noise_sigma * gain
            b_i = tx_offsets[k][a.id]
            rho[a.id] = prop + b_i - b_u + eps
            rho_local[a.id] = t_tx + prop + b_i
        responses.append(
            DeviceResponse(
                device_id=truth.device_id,
                ud_sync_toa=tau_u,
                ud_sync_rx_local=t_rx_u + truth.offset_at_rx,
                response_toas=rho,
                response_rx_local=rho_local,
                truth=truth,
                t_tx=t_tx,
                anchor_offsets_at_tx=tx_offsets[k],
            )
        )
    return EpochMeasurements(
        epoch_index=epoch_index,
        t_sync=t_sync,
        san_sync_toas=san_tau,
        san_sync_rx_local=san_local,
        san_offsets_at_rx=san_truth,
        responses=responses,
        clocks_next=clocks_next,
    )


def trial_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for epoch/trial ``index``; independent of execution order."""
    return np.random.default_rng([seed, 1, index])


def network_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def simulate(scenario: Scenario, n_epochs: int | None = None, seed: int | None = None,
             clock_noise: bool = True, measurement_noise: bool = True) -> list:
    """Run the protocol for ``n_epochs`` consecutive periods.

    Anchor clocks evolve continuously; device draws and response noise use a
    per-epoch generator, so any epoch's device realization depends only on
    ``(seed, epoch)``. Continuous device clocks with ``clock_random_walk``
    are evolved here as well.
    """
    n_epochs = scenario.epoch_count if n_epochs is None else n_epochs
    seed = scenario.seed if seed is None else seed
    net = network_rng(seed)
    ud_rng = np.random.default_rng([seed, 2])
    clocks = {a.id: a.clock for a in scenario.anchors}
    ud_clocks = {d.id: d.initial_clock for d in scenario.devices}
    ud_times = {d.id: 0.0 for d in scenario.devices}
    epochs = []
    for n in range(n_epochs):
        rng = trial_rng(seed, n)
        truths = []
        for d in scenario.devices:
            truth = draw_device_truth(d, scenario, n, rng)
            if d.clock == "continuous" and d.clock_random_walk:
                t_tx = n * scenario.sync_period + d.response_delay
                ud_clocks[d.id] = propagate_clock(
                    ud_clocks[d.id], t_tx - ud_times[d.id], scenario.clock_noise, ud_rng
                )
                ud_times[d.id] = t_tx
                truth = replace(truth, clock=ud_clocks[d.id])
            truths.append(truth)
        ep = synthesize_epoch(
            scenario, n, rng, anchor_clocks=clocks, device_truths=truths,
            network_rng=net, clock_noise=clock_noise, measurement_noise=measurement_noise,
        )
        clocks = ep.clocks_next
        epochs.append(ep)
    return epochs


# ---------------------------------------------------------------- defaults

def reference_scene(
    sigma_m: float = 0.05,
    delay: float = 0.005,
    epochs: int = 10_000,
    seed: int = 0,
) -> Scenario:
    """The 200 m x 200 m simulation scene with the reference clock and noise settings."""
    sigma = sigma_m / C
    anchors = (
        Anchor(1, np.array([100.0, 0.0]), "primary", ClockState(0.0, 0.0), sigma),
        Anchor(2, np.array([200.0, 100.0]), "secondary", ClockState(-5e-7, 1e-6), sigma),
        Anchor(3, np.array([100.0, 200.0]), "secondary", ClockState(8e-8, 5e-6), sigma),
        Anchor(4, np.array([0.0, 100.0]), "secondary", ClockState(2e-1, -3e-6), sigma),
    )
    device = DeviceConfig(id=1, response_delay=delay, noise_sigma=sigma)
    return Scenario(anchors, (device,), 0.01, 2, REFERENCE_CLOCK_NOISE, epochs, seed=seed)


# ---------------------------------------------------------------- config files

def _sigma(entry, default_m=0.05):
    if "noise_sigma" in entry:
        return float(entry["noise_sigma"])
    return float(entry.get("noise_sigma_m", default_m)) / C


def scenario_from_dict(cfg: dict) -> Scenario:
    """Build a scenario from a parsed config mapping (see README for the schema)."""
    dim = int(cfg.get("dimension", 2))
    anchors = []
    for entry in cfg["anchors"]:
        aid = int(entry["id"])
        drift = float(entry.get("drift", float(entry.get("drift_ppm", 0.0)) * 1e-6))
        anchors.append(Anchor(
            id=aid,
            position=np.asarray(entry["position"], dtype=float),
            role="primary" if aid == 1 else "secondary",
            clock=ClockState(float(entry.get("offset", 0.0)), drift),
            noise_sigma=_sigma(entry),
        ))
    devices = []
    for entry in cfg.get("devices", [{"id": 1}]):
        motion = entry.get("motion", {})
        clock = entry.get("clock", {})
        drift_range = clock.get("drift_range")
        if drift_range is None:
            lo, hi = clock.get("drift_ppm_range", (-20.0, 20.0))
            drift_range = (lo * 1e-6, hi * 1e-6)
        init_drift = float(clock.get("drift", float(clock.get("drift_ppm", 0.0)) * 1e-6))
        devices.append(DeviceConfig(
            id=int(entry.get("id", 1)),
            response_delay=float(entry.get("response_delay", 0.005)),
            noise_sigma=_sigma(entry),
            motion=motion.get("kind", "random"),
            region_center=tuple(motion.get("center", (100.0, 100.0))),
            region_half_width=float(motion.get("half_width", 40.0)),
            speed=float(motion.get("speed", 5.0)),
            position=tuple(motion.get("position", (100.0,) * dim)),
            velocity=tuple(motion.get("velocity", (0.0,) * dim)),
            clock=clock.get("kind", "random"),
            offset_range=tuple(clock.get("offset_range", (-1.0, 1.0))),
            drift_range=tuple(drift_range),
            initial_clock=ClockState(float(clock.get("offset", 0.0)), init_drift),
            clock_random_walk=bool(clock.get("random_walk", False)),
        ))
    noise = cfg.get("clock_noise", {})
    return Scenario(
        anchors=tuple(anchors),
        devices=tuple(devices),
        sync_period=float(cfg.get("sync_period", 0.01)),
        dimension=dim,
        clock_noise=ClockNoiseParams(float(noise.get("s_b", 1e-21)), float(noise.get("s_omega", 5.9e-23))),
        epoch_count=int(cfg.get("epochs", 10_000)),
        dropout_probability=float(cfg.get("dropout_probability", 0.0)),
        guard=float(cfg.get("guard", 0.0)),
        seed=int(cfg.get("seed", 0)),
    )


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(yaml.safe_load(fh))


# ---------------------------------------------------------------- trace CSV

TRACE_COLUMNS = [
    "epoch", "kind", "device", "node_id", "value_seconds", "rx_local_seconds",
    "true_offset_seconds", "ud_x", "ud_y", "ud_z", "ud_vx", "ud_vy", "ud_vz",
    "ud_offset_seconds", "ud_drift", "response_delay_seconds",
]


def _fmt(x):
    return "" if x is None else repr(float(x))


def _ud_cols(truth: UserDeviceTruth):
    p = list(truth.position_at_tx) + [None] * (3 - len(truth.position_at_tx))
    v = list(truth.velocity) + [None] * (3 - len(truth.velocity))
    return [*map(_fmt, p), *map(_fmt, v), _fmt(truth.clock.offset_b),
            _fmt(truth.clock.drift_omega), _fmt(truth.response_delay)]


def write_trace(epochs, path) -> None:
    """One row per (epoch, measurement). UD truth columns ride on device rows."""
    blank_ud = [""] * 9
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for ep in epochs:
            for aid in sorted(ep.san_sync_toas):
                w.writerow([ep.epoch_index, "sync_san", "", aid, _fmt(ep.san_sync_toas[aid]),
                            _fmt(ep.san_sync_rx_local[aid]), _fmt(ep.san_offsets_at_rx[aid]), *blank_ud])
            for resp in ep.responses:
                ud = _ud_cols(resp.truth)
                w.writerow([ep.epoch_index, "sync_ud", resp.device_id, "", _fmt(resp.ud_sync_toa),
                            _fmt(resp.ud_sync_rx_local), _fmt(resp.truth.offset_at_rx), *ud])
                for aid in sorted(resp.response_toas):
                    w.writerow([ep.epoch_index, "response", resp.device_id, aid,
                                _fmt(resp.response_toas[aid]), _fmt(resp.response_rx_local[aid]),
                                _fmt(resp.anchor_offsets_at_tx[aid]), *ud])


def read_trace(path) -> list:
    """Parse a trace CSV back into a list of row dicts with numeric fields."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out = {"epoch": int(row["epoch"]), "kind": row["kind"]}
            out["device"] = int(row["device"]) if row["device"] else None
            out["node_id"] = int(row["node_id"]) if row["node_id"] else None
            for key in TRACE_COLUMNS[4:]:
                out[key] = float(row[key]) if row[key] else None
            rows.append(out)
    return rows


def scenario_to_dict(sc: Scenario) -> dict:
    """Inverse of ``scenario_from_dict`` (plain types, stable key order).

    Values are written in base units (seconds, s/s) so a round trip is exact.
    """
    def dev(d: DeviceConfig):
        return {
            "id": d.id, "response_delay": d.response_delay, "noise_sigma": d.noise_sigma,
            "motion": {"kind": d.motion, "center": list(d.region_center), "half_width": d.region_half_width,
                       "speed": d.speed, "position": list(d.position), "velocity": list(d.velocity)},
            "clock": {"kind": d.clock, "offset_range": list(d.offset_range),
                      "drift_range": list(d.drift_range),
                      "offset": d.initial_clock.offset_b, "drift": d.initial_clock.drift_omega,
                      "random_walk": d.clock_random_walk},
        }

    return {
        "dimension": sc.dimension,
        "sync_period": sc.sync_period,
        "epochs": sc.epoch_count,
        "seed": sc.seed,
        "dropout_probability": sc.dropout_probability,
        "guard": sc.guard,
        "clock_noise": {"s_b": sc.clock_noise.s_b, "s_omega": sc.clock_noise.s_omega},
        "anchors": [
            {"id": a.id, "position": [float(x) for x in a.position], "offset": a.clock.offset_b,
             "drift": a.clock.drift_omega, "noise_sigma": a.noise_sigma}
            for a in sorted(sc.anchors, key=lambda a: a.id)
        ],
        "devices": [dev(d) for d in sc.devices],
    }


def write_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_dict(sc), sort_keys=False), encoding="utf-8")


def write_scenario_template(path) -> None:
    """Dump the reference scene as an editable config file."""
    write_scenario(reference_scene(), path)
