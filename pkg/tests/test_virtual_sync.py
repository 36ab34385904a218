import numpy as np
import pytest

from parn.clock_motion import C, NO_CLOCK_NOISE, REFERENCE_CLOCK_NOISE, ClockNoiseParams, ClockState, clock_trajectory
from parn.virtual_sync import (
    FilterError,
    FilterState,
    SanSyncEstimate,
    carn_offset_estimate,
    carn_track,
    init_filter,
    kf_step,
    predict_to,
    track_anchor,
)

SIG = 0.05 / C
PERIOD = 0.01


def _series(n, rng, clock=ClockState(2e-7, 1e-6), noise=REFERENCE_CLOCK_NOISE, sigma=SIG, d=100.0):
    t = np.arange(n) * PERIOD
    truth = clock_trajectory(clock, t, noise, rng)
    taus = truth[:, 0] + d / C + sigma * rng.standard_normal(n)
    return t, truth, taus


def test_init_examples():
    st = init_filter(1e-6 + 100 / C, 1.01e-6 + 100 / C, 0.0, 0.01, 100.0, SIG)
    assert st.x[0] == pytest.approx(1e-6, abs=1e-18)
    assert st.x[1] == pytest.approx(1e-6, rel=1e-6)
    np.testing.assert_allclose(np.diag(st.P), [SIG**2, 2 * SIG**2 / 1e-4])
    assert st.P[0, 1] == 0.0
    with pytest.raises(FilterError):
        init_filter(0.0, 0.0, 1.0, 1.0, 0.0, SIG)
    with pytest.raises(FilterError):
        init_filter(0.0, 0.0, 0.0, 1.0, 0.0, 0.0)


def test_huge_measurement_noise_means_no_gain():
    st = FilterState(np.array([1e-6, 1e-6]), np.diag([1e-20, 1e-16]), 0.0)
    nxt = kf_step(st, 5.0, 0.01, REFERENCE_CLOCK_NOISE, 1e6)
    assert nxt.x[0] == pytest.approx(1e-6 + 1e-8, rel=1e-9)
    assert nxt.x[1] == pytest.approx(1e-6, rel=1e-9)


def test_noiseless_clock_matches_batch_line_fit(rng):
    # without process noise the filter is recursive least squares on a line
    t = np.arange(300) * PERIOD
    z = 3e-7 + 2e-6 * t + SIG * rng.standard_normal(len(t))
    st = init_filter(z[0], z[1], t[0], t[1], 0.0, SIG)
    for k in range(2, len(t)):
        st = kf_step(st, z[k], t[k], NO_CLOCK_NOISE, SIG)
    # the init prior is informative, so compare to the fit that includes it:
    # offset prior z0 at t0 and drift prior (z1-z0)/dt, both exact-data equivalents
    A = np.column_stack([np.ones_like(t), t - t[-1]])
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    assert st.x[0] == pytest.approx(coef[0], abs=SIG / 5)
    assert st.x[1] == pytest.approx(coef[1], abs=5 * SIG / (t[-1] * np.sqrt(len(t))))
    # the batch fit's covariance bounds the filter's (which also carries the init prior)
    cov = SIG**2 * np.linalg.inv(A.T @ A)
    assert st.P[0, 0] == pytest.approx(cov[0, 0], rel=0.05)


def test_steady_state_prior_std():
    t, _, taus = _series(3000, np.random.default_rng(1))
    tr = track_anchor(taus, t, t, 100.0, SIG, REFERENCE_CLOCK_NOISE)
    prior_m = C * np.sqrt(tr.prior_var[-500:])
    assert np.ptp(prior_m) < 1e-6
    assert prior_m[-1] == pytest.approx(0.0073, rel=0.15)


def test_predict_to_examples():
    st = FilterState(np.array([1e-6, 1e-6]), np.zeros((2, 2)), 0.0)
    est = predict_to(st, 0.005, NO_CLOCK_NOISE, anchor_id=2)
    assert est.b_hat == pytest.approx(1.005e-6, rel=1e-12)
    assert est.sigma_b_sq == 0.0 and est.anchor_id == 2
    st = FilterState(np.array([0.0, 0.0]), np.diag([1e-20, 1e-18]), 0.0)
    var = [predict_to(st, dt, REFERENCE_CLOCK_NOISE).sigma_b_sq for dt in np.linspace(0, 0.05, 11)]
    assert np.all(np.diff(var) > 0)
    assert var[0] == pytest.approx(1e-20)
    with pytest.raises(FilterError):
        predict_to(FilterState(np.zeros(2), np.eye(2), 1.0), 0.5, REFERENCE_CLOCK_NOISE)


def test_carn_examples():
    est = carn_offset_estimate(1e-6 + 100 / C, 100.0, SIG, anchor_id=3)
    assert est.anchor_id == 3
    assert est.b_hat == pytest.approx(1e-6, abs=1e-20)
    assert est.sigma_b_sq == pytest.approx(SIG**2)
    tr = carn_track([100 / C, np.nan], 100.0, SIG)
    assert tr.b_hat[0] == pytest.approx(0.0, abs=1e-20)
    assert np.isnan(tr.sigma_b_sq[1])
    with pytest.raises(FilterError):
        SanSyncEstimate(1, 0.0, -1.0)


def test_joseph_form_agrees(rng):
    t, _, taus = _series(400, rng)
    a = b = init_filter(taus[0], taus[1], t[0], t[1], 100.0, SIG)
    for k in range(2, len(t)):
        z = taus[k] - 100.0 / C
        a = kf_step(a, z, t[k], REFERENCE_CLOCK_NOISE, SIG)
        b = kf_step(b, z, t[k], REFERENCE_CLOCK_NOISE, SIG, joseph=True)
    np.testing.assert_allclose(a.x, b.x, rtol=1e-9)
    np.testing.assert_allclose(a.P, b.P, rtol=1e-6)


def test_joseph_single_step_random(rng):
    for _ in range(50):
        l = rng.standard_normal((2, 2)) * [[1e-9], [1e-7]]
        st = FilterState(rng.standard_normal(2) * 1e-6, l @ l.T + np.diag([1e-22, 1e-18]), 0.0)
        sig = SIG * rng.uniform(0.5, 20)
        a = kf_step(st, 1e-7, 0.01, REFERENCE_CLOCK_NOISE, sig)
        b = kf_step(st, 1e-7, 0.01, REFERENCE_CLOCK_NOISE, sig, joseph=True)
        scale = np.sqrt(np.outer(np.diag(a.P), np.diag(a.P)))
        assert np.max(np.abs(a.P - b.P) / scale) < 1e-12
        np.testing.assert_array_equal(a.x, b.x)


def test_innovations_white_and_calibrated():
    t, _, taus = _series(6000, np.random.default_rng(2))
    tr = track_anchor(taus, t, t, 100.0, SIG, REFERENCE_CLOCK_NOISE)
    nu = tr.innovations[1000:]
    s = tr.prior_var[1000:] + SIG**2
    zn = nu / np.sqrt(s)
    assert abs(np.corrcoef(zn[:-1], zn[1:])[0, 1]) < 0.05
    assert np.std(zn) == pytest.approx(1.0, rel=0.05)


def test_prediction_coverage():
    rng = np.random.default_rng(3)
    t, truth, taus = _series(8000, rng)
    target = t + 0.004
    tr = track_anchor(taus, t, target, 100.0, SIG, REFERENCE_CLOCK_NOISE)
    true_at_target = truth[:, 0] + truth[:, 1] * 0.004
    k = slice(500, None)
    err = tr.b_hat[k] - true_at_target[k]
    cover = np.mean(np.abs(err) <= 3 * np.sqrt(tr.sigma_b_sq[k]))
    assert cover >= 0.99


def test_track_matches_stepwise(rng):
    t, _, taus = _series(200, rng)
    target = t + 0.003
    tr = track_anchor(taus, t, target, 100.0, SIG, REFERENCE_CLOCK_NOISE)
    st = init_filter(taus[0], taus[1], t[0], t[1], 100.0, SIG)
    assert np.isnan(tr.b_hat[0])
    for k in range(1, len(t)):
        if k > 1:
            st = kf_step(st, taus[k] - 100.0 / C, t[k], REFERENCE_CLOCK_NOISE, SIG)
        est = predict_to(st, target[k], REFERENCE_CLOCK_NOISE)
        assert tr.b_hat[k] == pytest.approx(est.b_hat, rel=1e-12, abs=1e-22)
        assert tr.sigma_b_sq[k] == pytest.approx(est.sigma_b_sq, rel=1e-9)
        np.testing.assert_allclose(tr.x_post[k], st.x, rtol=1e-12, atol=1e-22)


def test_dropouts_lengthen_interval(rng):
    t, _, taus = _series(100, rng)
    taus = taus.copy()
    taus[50:53] = np.nan
    tr = track_anchor(taus, t, t, 100.0, SIG, REFERENCE_CLOCK_NOISE)
    assert np.all(np.isfinite(tr.b_hat[1:]))
    # prediction variance grows during the outage
    assert tr.sigma_b_sq[52] > tr.sigma_b_sq[50] > tr.sigma_b_sq[49]
    # the first update after the outage sees the long interval
    assert tr.prior_var[53] > tr.prior_var[49]


def test_long_gap_restarts_filter(rng):
    t, _, taus = _series(100, rng)
    t = t.copy()
    t[60:] += 5.0
    tr = track_anchor(taus, t, t, 100.0, SIG, REFERENCE_CLOCK_NOISE, max_gap=1.0)
    assert np.isnan(tr.b_hat[60])
    assert np.isfinite(tr.b_hat[61])
    # restarted filter starts from the init covariance
    assert tr.p_post[61, 0] == pytest.approx(SIG**2)


def test_nonincreasing_timestamps_rejected():
    st = FilterState(np.zeros(2), np.eye(2) * 1e-20, 1.0)
    with pytest.raises(FilterError):
        kf_step(st, 0.0, 1.0, REFERENCE_CLOCK_NOISE, SIG)
    with pytest.raises(FilterError):
        kf_step(st, np.nan, 2.0, REFERENCE_CLOCK_NOISE, SIG)


def test_larger_process_noise_raises_steady_state():
    t, _, taus = _series(2000, np.random.default_rng(5))
    lo = track_anchor(taus, t, t, 100.0, SIG, REFERENCE_CLOCK_NOISE).prior_var[-1]
    hi = track_anchor(taus, t, t, 100.0, SIG, ClockNoiseParams(1e-19, 5.9e-21)).prior_var[-1]
    assert hi > lo
