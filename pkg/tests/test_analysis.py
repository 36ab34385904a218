import dataclasses

import numpy as np
import pytest

from conftest import moderate_scene, noiseless_input
from parn.analysis import (
    batch_crlb,
    batch_design,
    batch_last_row_bias,
    compare_modes,
    detrend_clock,
    differential_series,
    drift_deviation_report,
    fim,
    rmse_metrics,
    rough_drift_estimate,
    sync_row,
    velocity_deviation_report,
)
from parn.clock_motion import C, REFERENCE_CLOCK_NOISE
from parn.harness import run_diagnostics
from parn.las_solver import MODE1, MODE2, GeometryError, SolverInput, Theta, build_weight, design_matrix, model_h

SQUARE = np.array([[100.0, 0.0], [200.0, 100.0], [100.0, 200.0], [0.0, 100.0]])
SIG = 0.05 / C


def _inp(mode=MODE1, anchors=SQUARE, sigma_u=SIG, delay=0.005, v=(0.0, 0.0), sb=0.0073 / C, sig=SIG):
    m = len(anchors)
    kw = {}
    if mode == MODE1:
        kw = dict(ud_sync_toa=0.0, sigma_u=sigma_u, known_velocity=np.asarray(v, float), known_drift=0.0,
                  response_delay=delay)
    return SolverInput(anchors, np.zeros(m), np.zeros(m - 1), np.full(m - 1, sb**2), sig, mode=mode, **kw)


def _neg_expected_loglik_hessian(theta, inp, h=1e-3):
    # expected negative log-likelihood around the truth is 0.5 * dh' W dh + const
    w = build_weight(inp)
    h0 = model_h(Theta.from_vector(theta), inp)

    def f(x):
        d = model_h(Theta.from_vector(x), inp) - h0
        return 0.5 * d @ w @ d

    n = len(theta)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            ei, ej = np.eye(n)[i] * h, np.eye(n)[j] * h
            H[i, j] = (f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej) + f(theta - ei - ej)) / (4 * h * h)
    return H


def test_fim_matches_numerical_hessian(rng):
    for k in range(5):
        mode = (MODE1, MODE2)[k % 2]
        inp = _inp(mode, v=rng.normal(0, 3, 2))
        theta = np.append(rng.uniform(30, 170, 2), rng.normal(0, 100))
        F = fim(Theta.from_vector(theta), inp).fim
        H = _neg_expected_loglik_hessian(theta, inp)
        assert np.max(np.abs(F - H)) < 1e-4 * np.max(np.abs(F))


def test_mode1_fim_is_mode2_plus_rank_one(rng):
    for _ in range(10):
        th = Theta(rng.uniform(30, 170, 2), rng.normal(0, 100))
        inp = _inp(MODE1, v=rng.normal(0, 3, 2))
        f1 = fim(th, inp).fim
        f2 = fim(th, inp.with_mode(MODE2)).fim
        g = sync_row(th, inp)
        rank1 = np.outer(g, g) / (C**2 * SIG**2)
        assert np.max(np.abs(f1 - f2 - rank1)) <= 1e-12 * np.max(np.abs(f1))


def test_symmetric_scene_position_block():
    f = fim(Theta(np.array([100.0, 100.0]), 0.0), _inp(MODE2, sb=0.0)).fim
    assert f[0, 0] == pytest.approx(f[1, 1], rel=1e-14)
    assert abs(f[0, 1]) < 1e-12 * f[0, 0]


def test_compare_modes():
    th = Theta(np.array([90.0, 120.0]), 5.0)
    r1 = fim(th, _inp(MODE1))
    r2 = fim(th, _inp(MODE2))
    cmp = compare_modes(r1, r2)
    assert cmp.ordered and cmp.strict
    far = compare_modes(fim(th, _inp(MODE1, sigma_u=1e3)), r2)
    assert np.max(np.abs(far.gaps)) < 1e-12 * np.max(r2.crlb_diag)
    with pytest.raises(ValueError):
        compare_modes(r2, r1)


def test_mode_gaps_nonnegative_random_geometries(rng):
    for _ in range(100):
        anchors = rng.uniform(0, 200, (rng.integers(3, 7), 2))
        th = Theta(rng.uniform(0, 200, 2), rng.normal(0, 50))
        try:
            r1 = fim(th, _inp(MODE1, anchors, v=rng.normal(0, 5, 2)))
            r2 = fim(th, _inp(MODE2, anchors))
        except GeometryError:
            continue
        assert compare_modes(r1, r2).ordered


def test_crlb_report_bounds():
    r = fim(Theta(np.array([100.0, 100.0]), 0.0), _inp(MODE2))
    assert np.all(r.crlb_diag >= 0)
    assert r.position_bound == pytest.approx(np.sqrt(r.crlb_diag[0] + r.crlb_diag[1]))
    assert r.clock_bound == pytest.approx(np.sqrt(r.crlb_diag[2]))


def test_information_monotonicity(rng):
    th = Theta(np.array([80.0, 110.0]), 0.0)
    for _ in range(30):
        anchors = rng.uniform(0, 200, (5, 2))
        inp = _inp(MODE2, anchors, sig=rng.uniform(0.5, 2.0, 5) * SIG, sb=0.0)
        try:
            base = fim(th, inp).crlb_diag
        except GeometryError:
            continue
        k = rng.integers(5)
        sig = inp.sigmas.copy()
        sig[k] *= 0.5
        better = fim(th, dataclasses.replace(inp, sigmas=sig)).crlb_diag
        assert np.all(better <= base * (1 + 1e-12))


def test_velocity_deviation_zero_is_crlb():
    th = Theta(np.array([90.0, 110.0]), 0.0)
    inp = _inp(MODE1)
    rep = velocity_deviation_report(th, inp, np.zeros(2))
    assert rep.bias_norm_sq == 0.0
    assert rep.rmse == pytest.approx(np.sqrt(np.trace(fim(th, inp).crlb)), rel=1e-12)


def test_velocity_deviation_doubles_with_delay():
    th = Theta(np.array([100.0, 100.0]), 0.0)
    los = np.array([0.0, -1.0])  # toward the primary anchor
    norms = []
    for dt in (0.005, 0.010):
        inp = _inp(MODE1, delay=dt, v=10 * los)
        norms.append(np.sqrt(velocity_deviation_report(th, inp, np.zeros(2)).bias_norm_sq))
    assert norms[1] / norms[0] == pytest.approx(2.0, rel=1e-3)


def test_velocity_simplified_form_bounds_exact(rng):
    th = Theta(np.array([100.0, 100.0]), 0.0)
    for _ in range(20):
        dv = rng.normal(0, 8, 2)
        rep = velocity_deviation_report(th, _inp(MODE1, v=dv, delay=0.025), np.zeros(2))
        assert rep.bias_norm_sq <= rep.simplified_bias_norm_sq * 1.01
    # aligned with the LOS the two forms agree to first order
    rep = velocity_deviation_report(th, _inp(MODE1, v=(0.0, -8.0), delay=0.025), np.zeros(2))
    assert rep.bias_norm_sq == pytest.approx(rep.simplified_bias_norm_sq, rel=1e-3)


def test_velocity_deviation_requires_mode1():
    with pytest.raises(ValueError):
        velocity_deviation_report(Theta(np.array([90.0, 90.0]), 0.0), _inp(MODE2), np.zeros(2))
    with pytest.raises(ValueError):
        drift_deviation_report(Theta(np.array([90.0, 90.0]), 0.0), _inp(MODE2), 1e-7)


def test_drift_deviation_examples():
    th = Theta(np.array([90.0, 110.0]), 0.0)
    inp = _inp(MODE1, delay=0.025)
    assert drift_deviation_report(th, inp, 0.0).bias_norm_sq == 0.0
    rep = drift_deviation_report(th, inp, 0.5e-6)
    r_last = C * 0.5e-6 * 0.025
    assert r_last == pytest.approx(3.747, abs=1e-3)
    assert rep.simplified_bias_norm_sq == pytest.approx(rep.bias_norm_sq, rel=1e-12)
    ratios = []
    for dw, dt in [(1e-7, 0.005), (2e-7, 0.005), (1e-7, 0.02), (5e-7, 0.025)]:
        r = drift_deviation_report(th, _inp(MODE1, delay=dt), dw)
        ratios.append(np.sqrt(r.bias_norm_sq) / (dw * dt))
    # geometry identical, so the bias per unit d_omega*dt is constant
    assert np.ptp(ratios) <= 1e-12 * ratios[0]


def test_rmse_identity(rng):
    th = Theta(np.array([70.0, 130.0]), 2.0)
    for dv in rng.normal(0, 10, (10, 2)):
        rep = velocity_deviation_report(th, _inp(MODE1, v=dv, delay=0.01), np.zeros(2))
        assert rep.rmse**2 == pytest.approx(rep.bias_norm_sq + rep.variance_trace, rel=1e-12)
        assert rep.rmse**2 == pytest.approx(rep.position_mse + rep.clock_mse, rel=1e-12)


def test_bias_matches_solver_on_noiseless_data(rng):
    # the linearised bias is what the solver actually returns for small deviations
    from parn.las_solver import gauss_newton_solve

    inp, t = noiseless_input(moderate_scene(), rng, MODE1)
    th = Theta(t.position_at_tx, C * t.clock.offset_b)
    dev = dataclasses.replace(inp, known_drift=inp.known_drift + 2e-7)
    rep = drift_deviation_report(th, dev, 2e-7)
    est = gauss_newton_solve(dev)
    # agreement to first order; the remainder is the curvature of the range terms
    np.testing.assert_allclose(est.theta.as_vector() - th.as_vector(), rep.bias, rtol=2e-3)


def test_rmse_metrics():
    truth = [Theta(np.array([1.0, 2.0]), 3.0)]
    exact = rmse_metrics([np.array([1.0, 2.0, 3.0])], truth)
    assert (exact.position_rmse, exact.clock_rmse, exact.count) == (0.0, 0.0, 1)
    m = rmse_metrics([np.array([4.0, 6.0, 3.0])], truth)
    assert m.position_rmse == 5.0 and m.clock_rmse == 0.0
    assert rmse_metrics([], []).count == 0
    with pytest.raises(ValueError):
        rmse_metrics([np.zeros(3)], [np.zeros(4)])


def test_rmse_metrics_chi(rng):
    err = rng.normal(0, 0.3, (10_000, 3))
    m = rmse_metrics(err, np.zeros_like(err))
    assert m.position_rmse == pytest.approx(0.3 * np.sqrt(2), rel=0.02)
    assert m.clock_rmse == pytest.approx(0.3, rel=0.02)


def test_differential_series():
    t = np.array([0.0, 0.01, 0.025, 0.03, 0.07])
    np.testing.assert_array_equal(differential_series(np.full(5, 3.0), t), 0.0)
    np.testing.assert_allclose(differential_series(2.5 * t + 1, t), 2.5)
    assert len(differential_series(t, t)) == 4


def test_detrend_clock():
    d, b = 120.0, 3e-6
    rho = d / C - b
    assert detrend_clock(rho, b, d) == pytest.approx(0.0, abs=1e-9)
    assert detrend_clock(rho, b + 1e-9, d) == pytest.approx(C * 1e-9, rel=1e-6)
    np.testing.assert_allclose(detrend_clock([rho, rho], [b, b], [d, d]), 0.0, atol=1e-9)


def test_rough_drift(rng):
    t = np.arange(2000) * 0.01
    tau = 50 / C + 1e-4 + 3e-6 * t
    np.testing.assert_allclose(rough_drift_estimate(tau, t), 3e-6, rtol=1e-6)
    noisy = tau + 0.03 / C * rng.standard_normal(len(t))
    raw = rough_drift_estimate(noisy, t)
    assert np.std(raw) == pytest.approx(np.sqrt(2) * 0.03 / C / 0.01, rel=0.05)
    smooth = rough_drift_estimate(noisy, t, smooth=True, sigma_u=0.03 / C, noise=REFERENCE_CLOCK_NOISE)
    assert smooth.shape == raw.shape
    assert np.std(smooth[500:]) < np.std(raw)
    with pytest.raises(ValueError):
        rough_drift_estimate(noisy, t, smooth=True)


def test_trace_diagnostics_on_simulation():
    d = run_diagnostics(epochs=2000)
    assert d.detrended_mode1_m < d.detrended_mode2_m
    assert d.differential_filtered < d.differential_raw
    assert d.drift_smoothed < d.drift_raw
    assert d.drift_raw == pytest.approx(d.drift_raw_expected, rel=0.1)


def test_batched_forms_match_single(rng):
    t = 50
    p = rng.uniform(20, 180, (t, 2))
    anchors = np.broadcast_to(np.vstack([SQUARE, SQUARE[0] + [0.02, -0.01]]), (t, 5, 2))
    signs = np.array([-1, -1, -1, -1, 1.0])
    w = np.tile(1 / np.array([0.05, 0.06, 0.06, 0.06, 0.05]) ** 2, (t, 1))
    g, cov = batch_crlb(anchors, signs, w, p)
    r_last = rng.normal(0, 1, t)
    bias = batch_last_row_bias(g, w, cov, r_last)
    for k in range(t):
        gk = design_matrix(Theta(p[k], 0.0), _inp(MODE1, v=(4.0, -2.0)))
        np.testing.assert_allclose(g[k], gk, atol=1e-12)
        ck = np.linalg.inv(gk.T @ np.diag(w[k]) @ gk)
        np.testing.assert_allclose(cov[k], ck, rtol=1e-9)
        s = ck @ gk.T @ np.diag(w[k])
        np.testing.assert_allclose(bias[k], s[:, -1] * r_last[k], rtol=1e-9, atol=1e-14)
    with pytest.raises(GeometryError):
        batch_design(anchors[:1], signs, SQUARE[:1])


def test_batch_crlb_flags_degenerate():
    line = np.array([[[0.0, 0.0], [50.0, 0.0], [100.0, 0.0]]])
    _, cov = batch_crlb(line, -np.ones(3), np.ones((1, 3)), np.array([[75.0, 0.0]]))
    assert np.all(np.isnan(cov))
