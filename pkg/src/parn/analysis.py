"""Closed-form performance analysis and trace diagnostics.

Covers the Fisher information / CRLB of both solver modes, the bias and
RMSE caused by a wrong velocity or clock drift in mode 1, RMSE aggregation,
and the transforms used to inspect measured clock traces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .clock_motion import C, ClockNoiseParams
from .las_solver import MODE1, MODE2, GeometryError, SolverInput, Theta, build_weight, design_matrix
from .virtual_sync import track_anchor


def _spd_inverse(f):
    eig = np.linalg.eigvalsh(f)
    if eig[0] <= 0 or eig[-1] > _kernels.COND_LIMIT * eig[0]:
        raise GeometryError(f"information matrix degenerate (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})")
    l_f = np.linalg.cholesky(f)
    l_inv = np.linalg.solve(l_f, np.eye(len(f)))
    return l_inv.T @ l_inv


@dataclass(eq=False)
class CrlbReport:
    fim: np.ndarray
    crlb: np.ndarray  # full inverse
    mode: int

    @property
    def crlb_diag(self):
        return np.diag(self.crlb).copy()

    @property
    def position_bound(self):
        """sqrt of the trace of the position block, meters."""
        return float(np.sqrt(np.trace(self.crlb[:-1, :-1])))

    @property
    def clock_bound(self):
        return float(np.sqrt(self.crlb[-1, -1]))


def fim(theta_true: Theta, inp: SolverInput) -> CrlbReport:
    g = design_matrix(theta_true, inp)
    f = g.T @ build_weight(inp) @ g
    f = 0.5 * (f + f.T)
    return CrlbReport(f, _spd_inverse(f), inp.mode)


def sync_row(theta_true: Theta, inp: SolverInput) -> np.ndarray:
    """Design-matrix row contributed by the device's sync-TOA (mode 1)."""
    return design_matrix(theta_true, inp.with_mode(MODE1))[-1]


@dataclass(frozen=True, eq=False)
class ModeComparison:
    gaps: np.ndarray  # CRLB2 - CRLB1 per parameter, m^2
    ordered: bool
    strict: bool


def compare_modes(report1: CrlbReport, report2: CrlbReport, tol=1e-15) -> ModeComparison:
    if report1.mode != MODE1 or report2.mode != MODE2:
        raise ValueError("expected (mode 1, mode 2) reports")
    gaps = report2.crlb_diag - report1.crlb_diag
    return ModeComparison(gaps, bool(np.all(gaps >= -tol)), bool(np.all(gaps > 0)))


@dataclass(eq=False)
class DeviationReport:
    bias: np.ndarray  # m
    covariance: np.ndarray
    deviation: float  # |dv| m/s or d_omega
    delay: float  # s
    simplified_bias_norm_sq: float = np.nan

    @property
    def bias_norm_sq(self):
        return float(self.bias @ self.bias)

    @property
    def variance_trace(self):
        return float(np.trace(self.covariance))

    @property
    def rmse(self):
        return float(np.sqrt(self.bias_norm_sq + self.variance_trace))

    @property
    def position_mse(self):
        b = self.bias[:-1]
        return float(b @ b + np.trace(self.covariance[:-1, :-1]))

    @property
    def clock_mse(self):
        return float(self.bias[-1] ** 2 + self.covariance[-1, -1])


def _bias_from_last_row(g, w, r_last):
    """Bias of the WLS estimate driven by an error in the last measurement only."""
    cov = _spd_inverse(g.T @ w @ g)
    s = cov @ g.T @ w
    bias = s[:, -1] * r_last
    sts = (s.T @ s)[-1, -1]
    return bias, cov, sts


def velocity_deviation_report(theta_true: Theta, inp: SolverInput, true_velocity) -> DeviationReport:
    """Bias and RMSE of mode 1 when ``inp.known_velocity`` differs from the truth.

    The residual is the exact range difference between the assumed and true
    reception geometry; the simplified entry assumes the deviation is parallel
    to the line of sight and a far-field device.
    """
    if inp.mode != MODE1:
        raise ValueError("velocity deviation applies to mode 1 only")
    dt = inp.response_delay
    p1 = inp.anchor_positions[0]
    p_u = np.asarray(theta_true.p_u, dtype=float)
    v_true = np.asarray(true_velocity, dtype=float)
    dv = inp.known_velocity - v_true
    # G_v: LOS rows at the true position, sync row along the assumed geometry
    g = design_matrix(theta_true, inp)
    w = build_weight(inp)
    # measurement (true v) minus model (assumed v) at the truth
    r_last = np.linalg.norm(p1 - p_u + v_true * dt) - np.linalg.norm(p1 - p_u + inp.known_velocity * dt)
    bias, cov, sts = _bias_from_last_row(g, w, r_last)
    simplified = sts * float(dv @ dv) * dt**2
    return DeviationReport(bias, cov, float(np.linalg.norm(dv)), dt, simplified)


def drift_deviation_report(theta_true: Theta, inp: SolverInput, delta_omega: float) -> DeviationReport:
    """Bias and RMSE of mode 1 when the assumed drift is off by ``delta_omega``."""
    if inp.mode != MODE1:
        raise ValueError("drift deviation applies to mode 1 only")
    dt = inp.response_delay
    g = design_matrix(theta_true, inp)
    w = build_weight(inp)
    r_last = C * delta_omega * dt
    bias, cov, sts = _bias_from_last_row(g, w, r_last)
    return DeviationReport(bias, cov, float(delta_omega), dt, sts * r_last**2)


@dataclass(frozen=True)
class RmseMetrics:
    position_rmse: float  # m
    clock_rmse: float  # m
    count: int


def rmse_metrics(estimates, truths) -> RmseMetrics:
    """RMSE over samples of position norm error and of c*b_u error.

    ``estimates``/``truths`` are sequences of LasEstimate/Theta or (K, N+1)
    arrays of ``[p, cb]``.
    """
    est = np.array([e.theta.as_vector() if hasattr(e, "theta") else np.asarray(e) for e in estimates], dtype=float)
    tru = np.array([t.as_vector() if hasattr(t, "as_vector") else np.asarray(t) for t in truths], dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if len(est) == 0:
        return RmseMetrics(np.nan, np.nan, 0)
    err = est - tru
    pos = np.sqrt(np.mean(np.sum(err[:, :-1] ** 2, axis=1)))
    clk = np.sqrt(np.mean(err[:, -1] ** 2))
    return RmseMetrics(float(pos), float(clk), len(est))


def differential_series(values, timestamps) -> np.ndarray:
    """Adjacent differences normalized by the timestamp gaps."""
    v = np.asarray(values, dtype=float)
    t = np.asarray(timestamps, dtype=float)
    return np.diff(v) / np.diff(t)


def detrend_clock(rho_1, b_hat_u, distance):
    """Device clock estimate de-trended with the primary anchor's response-TOA, meters."""
    return C * np.asarray(rho_1) + C * np.asarray(b_hat_u) - np.asarray(distance)


def rough_drift_estimate(tau_u, tx_timestamps, smooth=False, sigma_u=None,
                         noise: ClockNoiseParams | None = None) -> np.ndarray:
    """Drift of a stationary device's clock from its sync-TOA series.

    The raw estimate is the differential series of ``tau_u``. With
    ``smooth=True`` the same series is run through the clock Kalman filter and
    its drift state is returned instead (the first sample has no estimate
    and is dropped so both forms align with ``tx_timestamps[1:]``).
    """
    if not smooth:
        return differential_series(tau_u, tx_timestamps)
    if sigma_u is None or noise is None:
        raise ValueError("smoothing needs sigma_u and clock noise parameters")
    t = np.asarray(tx_timestamps, dtype=float)
    track = track_anchor(tau_u, t, t, 0.0, sigma_u, noise)
    return track.x_post[1:, 1]


# ---------------------------------------------------------------- batched forms

def batch_design(anchors, signs, p_true) -> np.ndarray:
    """Design matrices (T, K, N+1) for kernel-form rows at true positions (T, N)."""
    diff = np.asarray(anchors) - np.asarray(p_true)[:, None, :]
    dist = np.linalg.norm(diff, axis=2)
    if np.any(dist == 0.0):
        raise GeometryError("zero-length LOS vector")
    sign_cols = np.broadcast_to(np.asarray(signs, dtype=float), dist.shape)[..., None]
    return np.concatenate([-diff / dist[..., None], sign_cols], axis=2)


def batch_crlb(anchors, signs, w, p_true):
    """Per-problem ``(G, F^-1)``. Ill-conditioned problems get NaN bounds."""
    g = batch_design(anchors, signs, p_true)
    f = np.einsum("tki,tk,tkj->tij", g, w, g)
    eig = np.linalg.eigvalsh(f)
    bad = (eig[:, 0] <= 0) | (eig[:, -1] > _kernels.COND_LIMIT * eig[:, 0])
    f[bad] = np.eye(f.shape[1])
    cov = np.linalg.inv(f)
    cov[bad] = np.nan
    return g, cov


def batch_last_row_bias(g, w, cov, r_last) -> np.ndarray:
    """Bias vectors (T, N+1) from an error ``r_last`` (T,) in the last row."""
    s_last = np.einsum("tij,tj->ti", cov, g[:, -1, :]) * w[:, -1][:, None]
    return s_last * np.asarray(r_last)[:, None]
