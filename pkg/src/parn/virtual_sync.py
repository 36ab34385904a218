"""Virtual synchronization of secondary anchors.

Each secondary anchor runs its own two-state Kalman filter (clock offset and
drift) on its periodic sync-TOAs. The filter is driven purely by the anchor's
local reception timestamps. ``carn_offset_estimate`` is the single-shot
baseline used by conventional asymmetric ranging networks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .clock_motion import C, ClockNoiseParams, process_noise_cov, transition_matrix

H = np.array([[1.0, 0.0]])


class FilterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FilterState:
    x: np.ndarray  # [offset s, drift]
    P: np.ndarray  # 2x2
    last_update_time: float  # local timestamp of the last update


@dataclass(frozen=True)
class SanSyncEstimate:
    anchor_id: int | None
    b_hat: float  # s, at the target instant
    sigma_b_sq: float  # s^2

    def __post_init__(self):
        if not self.sigma_b_sq >= 0:
            raise FilterError("sigma_b_sq must be nonnegative")


def init_filter(tau_1, tau_2, t_rx_1, t_rx_2, d_i1, sigma_i) -> FilterState:
    """Initial state from the first two sync-TOAs of an anchor."""
    gap = t_rx_2 - t_rx_1
    if not gap > 0:
        raise FilterError(f"timestamps must increase, got gap {gap}")
    if not sigma_i > 0:
        raise FilterError("sigma_i must be positive")
    x = np.array([tau_1 - d_i1 / C, (tau_2 - tau_1) / gap])
    P = np.diag([sigma_i**2, 2.0 * sigma_i**2 / gap**2])
    return FilterState(x, P, float(t_rx_1))


def _check_psd(P):
    scale = max(abs(P[0, 0]), abs(P[1, 1]), 1e-300)
    if np.linalg.eigvalsh(P / scale)[0] < -1e-12:
        raise FilterError(f"covariance lost positive semidefiniteness: {P}")
    return 0.5 * (P + P.T)


def kf_step(state: FilterState, z, t_rx, noise: ClockNoiseParams, sigma_i, joseph=False) -> FilterState:
    """One predict/update cycle with the measurement ``z = tau - d_i1 / c``."""
    if not (np.isfinite(z) and np.isfinite(t_rx)):
        raise FilterError("non-finite measurement or timestamp")
    dt = t_rx - state.last_update_time
    if not dt > 0:
        raise FilterError(f"timestamps must increase, got dt={dt}")
    phi = transition_matrix(dt)
    x_prior = phi @ state.x
    p_prior = phi @ state.P @ phi.T + process_noise_cov(noise, dt)
    s = (H @ p_prior @ H.T).item() + sigma_i**2
    k = p_prior @ H.T / s
    x = x_prior + (k * (z - x_prior[0])).ravel()
    ikh = np.eye(2) - k @ H
    if joseph:
        P = ikh @ p_prior @ ikh.T + (k @ k.T) * sigma_i**2
    else:
        P = ikh @ p_prior
    return FilterState(x, _check_psd(P), float(t_rx))


def predict_to(state: FilterState, t_target, noise: ClockNoiseParams, anchor_id=None) -> SanSyncEstimate:
    dt = t_target - state.last_update_time
    if dt < 0:
        raise FilterError(f"cannot predict backwards (dt={dt})")
    phi = transition_matrix(dt)
    b_hat = (phi @ state.x)[0]
    var = (phi @ state.P @ phi.T + process_noise_cov(noise, dt))[0, 0]
    return SanSyncEstimate(anchor_id, float(b_hat), float(var))


def carn_offset_estimate(tau_latest, d_i1, sigma_i, anchor_id=None) -> SanSyncEstimate:
    if not sigma_i > 0:
        raise FilterError("sigma_i must be positive")
    return SanSyncEstimate(anchor_id, float(tau_latest - d_i1 / C), float(sigma_i**2))


@dataclass
class AnchorTrack:
    """Per-epoch filter output for one secondary anchor.

    Entries before the filter is initialized are NaN.
    """

    anchor_id: int
    b_hat: np.ndarray  # predicted offset at each target instant, s
    sigma_b_sq: np.ndarray
    prior_var: np.ndarray  # [P_{n|n-1}]_{1,1} at each sync update
    innovations: np.ndarray
    x_post: np.ndarray  # (n, 2)
    p_post: np.ndarray  # (n, 3): P00, P01, P11


def track_anchor(
    taus,
    t_rx,
    t_target,
    d_i1,
    sigma_i,
    noise: ClockNoiseParams,
    anchor_id=None,
    max_gap: float = 1.0,
    backend=None,
) -> AnchorTrack:
    """Filter a whole sync-TOA series and predict to per-epoch target instants.

    ``taus`` may contain NaN for lost measurements; the filter then simply
    sees a longer interval. A gap longer than ``max_gap`` seconds between
    consecutive measurements restarts the filter from the next two.
    """
    kern = _kernels if backend is None else _kernels.get_backend(backend)
    taus = np.asarray(taus, dtype=float)
    t_rx = np.asarray(t_rx, dtype=float)
    t_target = np.asarray(t_target, dtype=float)
    n = len(taus)
    out = AnchorTrack(
        anchor_id,
        np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan),
        np.full((n, 2), np.nan), np.full((n, 3), np.nan),
    )
    valid = np.flatnonzero(np.isfinite(taus))
    z = taus - d_i1 / C
    pos = 0
    while pos + 1 < len(valid):
        i0, i1 = valid[pos], valid[pos + 1]
        if t_rx[i1] - t_rx[i0] > max_gap:
            pos += 1
            continue
        state = init_filter(taus[i0], taus[i1], t_rx[i0], t_rx[i1], d_i1, sigma_i)
        # segment runs until a too-long gap between consecutive measurements
        end_pos = pos + 1
        while end_pos + 1 < len(valid) and t_rx[valid[end_pos + 1]] - t_rx[valid[end_pos]] <= max_gap:
            end_pos += 1
        stop = valid[end_pos + 1] if end_pos + 1 < len(valid) else n
        rows = slice(i1, stop)
        has_z = np.isfinite(taus[rows]).astype(np.uint8)
        has_z[0] = 0  # the second measurement already went into the initial drift
        zz = np.where(has_z, z[rows], 0.0)
        tm = np.where(has_z, t_rx[rows], 0.0)
        x_post, p_post, prior00, innov, b_pred, var_pred = kern.kalman_track(
            np.ascontiguousarray(zz), np.ascontiguousarray(has_z), np.ascontiguousarray(tm),
            np.ascontiguousarray(t_target[rows]), state.x, state.P, state.last_update_time,
            noise.s_b, noise.s_omega, sigma_i**2,
        )
        out.x_post[rows] = x_post
        out.p_post[rows] = p_post
        out.prior_var[rows] = prior00
        out.innovations[rows] = innov
        out.b_hat[rows] = b_pred
        out.sigma_b_sq[rows] = var_pred
        pos = end_pos + 1
    return out


def carn_track(taus, d_i1, sigma_i, anchor_id=None) -> AnchorTrack:
    """Single-shot offsets: each epoch uses only its own sync-TOA."""
    taus = np.asarray(taus, dtype=float)
    n = len(taus)
    b = taus - d_i1 / C
    var = np.where(np.isfinite(taus), sigma_i**2, np.nan)
    nan = np.full(n, np.nan)
    return AnchorTrack(anchor_id, b, var, nan, nan.copy(), np.full((n, 2), np.nan), np.full((n, 3), np.nan))
