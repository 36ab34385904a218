import dataclasses

import numpy as np
import pytest

from parn.clock_motion import C, ClockState
from parn.las_solver import MODE1, MODE2, SolverInput
from parn.scenario import DeviceConfig, reference_scene, synthesize_epoch

# lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def moderate_scene(**kw):
    """Reference geometry with clock offsets small enough that float64 keeps
    sub-nanometre resolution in every TOA."""
    sc = reference_scene(**kw)
    anchors = tuple(
        dataclasses.replace(a, clock=ClockState(2e-7, a.clock.drift_omega)) if a.id == 4 else a
        for a in sc.anchors
    )
    dev = dataclasses.replace(sc.devices[0], offset_range=(-1e-3, 1e-3))
    return dataclasses.replace(sc, anchors=anchors, devices=(dev,))


def noiseless_input(scene, rng, mode=MODE2, epoch=3):
    """Noise-free epoch plus the solver input built from the true clocks."""
    ep = synthesize_epoch(scene, epoch, rng, clock_noise=False, measurement_noise=False)
    resp = ep.responses[0]
    t = resp.truth
    ids = sorted(resp.response_toas)
    kw = {}
    if mode == MODE1:
        kw = dict(ud_sync_toa=resp.ud_sync_toa, sigma_u=t.noise_sigma, known_velocity=t.velocity,
                  known_drift=t.clock.drift_omega, response_delay=t.response_delay)
    inp = SolverInput(
        scene.anchor_positions,
        [resp.response_toas[i] for i in ids],
        [resp.anchor_offsets_at_tx[i] for i in ids[1:]],
        np.zeros(len(ids) - 1),
        scene.anchor_sigmas,
        mode=mode,
        **kw,
    )
    return inp, t


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scene():
    return reference_scene()


@pytest.fixture
def small_scene():
    return moderate_scene()
