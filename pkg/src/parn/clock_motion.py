"""Clock random-walk model and constant-velocity motion.

All clock quantities are kept in seconds. Conversion to meters (times ``C``)
only happens in the solver and in reports.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

C = 299_792_458.0  # m/s


@dataclass(frozen=True)
class ClockState:
    offset_b: float  # s
    drift_omega: float  # s/s

    def __post_init__(self):
        if not (np.isfinite(self.offset_b) and np.isfinite(self.drift_omega)):
            raise ValueError("clock state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.offset_b, self.drift_omega])


@dataclass(frozen=True)
class ClockNoiseParams:
    s_b: float  # offset spectral amplitude, s
    s_omega: float  # drift spectral amplitude, 1/s

    def __post_init__(self):
        if self.s_b < 0 or self.s_omega < 0:
            raise ValueError("spectral amplitudes must be nonnegative")


# reference oscillator values
REFERENCE_CLOCK_NOISE = ClockNoiseParams(s_b=1e-21, s_omega=5.9e-23)
NO_CLOCK_NOISE = ClockNoiseParams(0.0, 0.0)


def transition_matrix(dt: float) -> np.ndarray:
    return np.array([[1.0, dt], [0.0, 1.0]])


def process_noise_cov(params: ClockNoiseParams, dt: float) -> np.ndarray:
    """Covariance of the clock process noise accumulated over ``dt`` seconds."""
    if dt < 0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    sb, sw = params.s_b, params.s_omega
    q01 = sw * dt**2 / 2.0
    return np.array([[sb * dt + sw * dt**3 / 3.0, q01], [q01, sw * dt]])


def sample_process_noise(cov: np.ndarray, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw zero-mean Gaussian 2-vectors with covariance ``cov``.

    Uses a Cholesky factor, falling back to a clamped eigen-decomposition when
    ``cov`` is singular (e.g. one spectral amplitude is zero).
    """
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    shape = (2,) if size is None else (size, 2)
    z = rng.standard_normal(shape)
    return z @ factor.T


def propagate_clock(
    state: ClockState,
    dt: float,
    noise_params: ClockNoiseParams,
    rng: np.random.Generator | None = None,
) -> ClockState:
    """One random-walk step. ``rng=None`` disables the process noise."""
    if dt < 0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    b = state.offset_b + state.drift_omega * dt
    w = state.drift_omega
    if rng is not None:
        eta = sample_process_noise(process_noise_cov(noise_params, dt), rng)
        b += eta[0]
        w += eta[1]
    return ClockState(b, w)


def clock_trajectory(
    initial: ClockState,
    times: np.ndarray,
    noise_params: ClockNoiseParams,
    rng: np.random.Generator | None,
    t0: float = 0.0,
) -> np.ndarray:
    """Evolve a clock through the increasing instants ``times``.

    Returns an array of shape (len(times), 2) holding offset and drift at each
    instant. The state at ``t0`` is ``initial``.
    """
    times = np.asarray(times, dtype=float)
    dts = np.diff(np.concatenate(([t0], times)))
    if np.any(dts < 0):
        raise ValueError("times must be nondecreasing and not before t0")
    out = np.empty((len(times), 2))
    b, w = initial.offset_b, initial.drift_omega
    if rng is not None:
        z = rng.standard_normal((len(times), 2))
    for k, dt in enumerate(dts):
        b += w * dt
        if rng is not None and dt > 0:
            q = process_noise_cov(noise_params, dt)
            # closed-form 2x2 Cholesky, tolerant of a zero diagonal
            l00 = np.sqrt(q[0, 0])
            l10 = q[1, 0] / l00 if l00 > 0 else 0.0
            l11 = np.sqrt(max(q[1, 1] - l10 * l10, 0.0))
            b += l00 * z[k, 0]
            w += l10 * z[k, 0] + l11 * z[k, 1]
        out[k] = b, w
    return out


def propagate_position(p, v, dt: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if p.shape != v.shape:
        raise ValueError(f"position {p.shape} and velocity {v.shape} differ in dimension")
    return p + v * dt
