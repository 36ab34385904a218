"""Maximum-likelihood localization and synchronization (ML-LAS).

Unknowns are the device position at its response transmission instant and
its clock offset expressed in meters, ``theta = [p_u, c * b_u]``.

Mode 2 uses the M response-TOAs. Mode 1 adds the device's own sync-TOA,
which requires the device velocity and clock drift to be known, since that
measurement is taken ``response_delay`` before transmission.

Every measurement row has the form ``||a_k - p|| + offset_k + sign_k * cb``
which is what the batched kernels solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .clock_motion import C

MODE1 = 1
MODE2 = 2

DEFAULT_MAX_ITER = 10
DEFAULT_STEP_TOL = 1e-6  # m


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Theta:
    p_u: np.ndarray  # m
    cb_u: float  # m

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:-1].copy(), float(vec[-1]))

    def as_vector(self) -> np.ndarray:
        return np.append(np.asarray(self.p_u, dtype=float), self.cb_u)


@dataclass(eq=False)
class SolverInput:
    """Everything the solver needs for one device in one epoch.

    ``b_check`` and ``sigma_b_sq`` hold the secondary-anchor clock estimates
    (ids 2..M, seconds and seconds^2) at the device transmission instant.
    ``sigmas`` holds per-anchor TOA noise (ids 1..M, seconds).
    """

    anchor_positions: np.ndarray  # (M, N) m
    response_toas: np.ndarray  # (M,) s
    b_check: np.ndarray  # (M-1,) s
    sigma_b_sq: np.ndarray  # (M-1,) s^2
    sigmas: np.ndarray  # (M,) s
    mode: int = MODE2
    ud_sync_toa: float | None = None
    sigma_u: float | None = None
    known_velocity: np.ndarray | None = None
    known_drift: float | None = None
    response_delay: float = 0.0

    def __post_init__(self):
        self.anchor_positions = np.atleast_2d(np.asarray(self.anchor_positions, dtype=float))
        m, n = self.anchor_positions.shape
        self.response_toas = np.asarray(self.response_toas, dtype=float)
        self.b_check = np.asarray(self.b_check, dtype=float)
        self.sigma_b_sq = np.asarray(self.sigma_b_sq, dtype=float)
        self.sigmas = np.broadcast_to(np.asarray(self.sigmas, dtype=float), (m,)).copy()
        if m < n + 1:
            raise GeometryError(f"{m} anchors cannot resolve {n}D position and clock offset")
        if self.response_toas.shape != (m,) or self.b_check.shape != (m - 1,) or self.sigma_b_sq.shape != (m - 1,):
            raise ValueError("response_toas needs M entries, b_check/sigma_b_sq need M-1")
        if self.mode not in (MODE1, MODE2):
            raise ValueError(f"mode must be 1 or 2, got {self.mode}")
        if self.mode == MODE1:
            if self.ud_sync_toa is None or self.known_velocity is None or self.known_drift is None or self.sigma_u is None:
                raise ValueError("mode 1 needs ud_sync_toa, sigma_u, known_velocity and known_drift")
            self.known_velocity = np.asarray(self.known_velocity, dtype=float)
            if self.known_velocity.shape != (n,):
                raise ValueError("known_velocity dimension does not match anchors")

    @classmethod
    def from_estimates(cls, anchor_positions, response_toas, san_estimates, sigmas, **kw):
        ests = sorted(san_estimates, key=lambda e: (e.anchor_id is None, e.anchor_id))
        return cls(
            anchor_positions, response_toas,
            [e.b_hat for e in ests], [e.sigma_b_sq for e in ests], sigmas, **kw,
        )

    @property
    def dimension(self):
        return self.anchor_positions.shape[1]

    @property
    def n_anchors(self):
        return self.anchor_positions.shape[0]

    def with_mode(self, mode) -> "SolverInput":
        kw = dict(self.__dict__)
        kw["mode"] = mode
        return SolverInput(**kw)


@dataclass(eq=False)
class LasEstimate:
    theta: Theta
    covariance: np.ndarray
    iterations: int
    final_residual_norm: float  # m
    converged: bool
    status: int = field(default=_kernels.STATUS_OK)


def measurement_rows(inp: SolverInput):
    """Kernel form of the problem: ``(anchor_rows, offsets, signs, weights, meas)``."""
    m = inp.n_anchors
    anchors = inp.anchor_positions
    offsets = np.concatenate(([0.0], C * inp.b_check))
    signs = -np.ones(m)
    meas = C * inp.response_toas
    w = build_weight(inp)
    if inp.mode == MODE1:
        anchors = np.vstack([anchors, anchors[0] + inp.known_velocity * inp.response_delay])
        offsets = np.append(offsets, -C * inp.known_drift * inp.response_delay)
        signs = np.append(signs, 1.0)
        meas = np.append(meas, C * inp.ud_sync_toa)
    return anchors, offsets, signs, np.diag(w).copy(), meas


def build_weight(inp: SolverInput) -> np.ndarray:
    """Diagonal inverse-variance weights in m^-2."""
    var = np.empty(inp.n_anchors)
    var[0] = inp.sigmas[0] ** 2
    var[1:] = inp.sigma_b_sq + inp.sigmas[1:] ** 2
    if inp.mode == MODE1:
        var = np.append(var, inp.sigma_u**2)
    var = C**2 * var
    if np.any(~(var > 0)):
        raise ValueError("all measurement variances must be positive")
    return np.diag(1.0 / var)


def model_h(theta: Theta, inp: SolverInput) -> np.ndarray:
    anchors, offsets, signs, _, _ = measurement_rows(inp)
    dist = np.linalg.norm(anchors - theta.p_u, axis=1)
    return dist + offsets + signs * theta.cb_u


def measurement_vector(inp: SolverInput) -> np.ndarray:
    """Stacked measurements in meters (``c * rho`` then ``c * tau_u`` in mode 1)."""
    return measurement_rows(inp)[4]


def design_matrix(theta: Theta, inp: SolverInput) -> np.ndarray:
    anchors, _, signs, _, _ = measurement_rows(inp)
    diff = anchors - theta.p_u
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist == 0.0):
        raise GeometryError("device estimate coincides with an anchor (zero-length LOS vector)")
    return np.column_stack([-diff / dist[:, None], signs])


def wls_cost(theta_vec, inp: SolverInput) -> float:
    """Weighted squared residual norm; the ML objective."""
    anchors, offsets, signs, w, meas = measurement_rows(inp)
    n = inp.dimension
    r = meas - (np.linalg.norm(anchors - theta_vec[:n], axis=1) + offsets + signs * theta_vec[n])
    return float(r @ (w * r))


def initial_theta(inp: SolverInput) -> Theta:
    """Anchor centroid, with the offset that explains the primary's response-TOA."""
    p0 = inp.anchor_positions.mean(axis=0)
    mean_dist = np.linalg.norm(inp.anchor_positions - p0, axis=1).mean()
    return Theta(p0, float(mean_dist - C * inp.response_toas[0]))


def gauss_newton_solve(
    inp: SolverInput,
    theta_init: Theta | None = None,
    max_iter: int = DEFAULT_MAX_ITER,
    step_tol: float = DEFAULT_STEP_TOL,
    backend=None,
) -> LasEstimate:
    """Iterate WLS Gauss-Newton steps until the step norm drops below ``step_tol``.

    Raises GeometryError for degenerate or ill-conditioned geometry. Running
    out of iterations is reported via ``converged=False``.
    """
    kern = _kernels if backend is None else _kernels.get_backend(backend)
    theta_init = initial_theta(inp) if theta_init is None else theta_init
    if not np.all(np.isfinite(theta_init.as_vector())):
        raise ValueError("initial theta must be finite")
    anchors, offsets, signs, w, meas = measurement_rows(inp)
    theta, cov, iters, resid, status = kern.gauss_newton_batch(
        anchors[None], offsets[None], signs, w[None], meas[None],
        theta_init.as_vector()[None], int(max_iter), float(step_tol),
    )
    st = int(status[0])
    if st == _kernels.STATUS_DEGENERATE:
        raise GeometryError("zero-length line-of-sight vector during iteration")
    if st == _kernels.STATUS_ILLCOND:
        raise GeometryError(f"normal matrix ill-conditioned (condition number > {_kernels.COND_LIMIT:g})")
    return LasEstimate(
        Theta.from_vector(theta[0]), cov[0], int(iters[0]), float(resid[0]),
        st == _kernels.STATUS_OK, st,
    )


def solve_batch(anchors, offsets, signs, w, meas, theta0,
                max_iter=DEFAULT_MAX_ITER, step_tol=DEFAULT_STEP_TOL, backend=None):
    """Solve many problems in kernel form; failures are flagged in ``status``."""
    kern = _kernels if backend is None else _kernels.get_backend(backend)
    return kern.gauss_newton_batch(
        np.ascontiguousarray(anchors, dtype=float), np.ascontiguousarray(offsets, dtype=float),
        np.ascontiguousarray(signs, dtype=float), np.ascontiguousarray(w, dtype=float),
        np.ascontiguousarray(meas, dtype=float), np.ascontiguousarray(theta0, dtype=float),
        int(max_iter), float(step_tol),
    )


def batch_rows(anchor_positions, rho, b_check, sigma_b_sq, sigmas, mode,
               tau_u=None, sigma_u=None, known_velocity=None, known_drift=None, delay=0.0):
    """Vectorized ``measurement_rows`` over T problems sharing one anchor layout.

    ``rho`` is (T, M); ``b_check``/``sigma_b_sq`` are (T, M-1); ``sigmas`` is (M,).
    Mode 1 also takes ``tau_u`` (T,), ``known_velocity`` (T, N), ``known_drift`` (T,).
    """
    pos = np.asarray(anchor_positions, dtype=float)
    rho = np.atleast_2d(rho)
    t, m = rho.shape
    sigmas = np.asarray(sigmas, dtype=float)
    anchors = np.broadcast_to(pos, (t,) + pos.shape)
    offsets = np.column_stack([np.zeros(t), C * np.asarray(b_check)])
    var = np.column_stack([np.full(t, sigmas[0] ** 2), np.asarray(sigma_b_sq) + sigmas[1:] ** 2])
    signs = -np.ones(m)
    meas = C * rho
    if mode == MODE1:
        extra = pos[0] + np.asarray(known_velocity) * delay
        anchors = np.concatenate([anchors, extra[:, None, :]], axis=1)
        offsets = np.column_stack([offsets, -C * np.asarray(known_drift) * delay])
        var = np.column_stack([var, np.full(t, sigma_u**2)])
        signs = np.append(signs, 1.0)
        meas = np.column_stack([meas, C * np.asarray(tau_u)])
    w = 1.0 / (C**2 * var)
    return np.ascontiguousarray(anchors), offsets, signs, w, meas


def batch_initial_theta(anchor_positions, rho):
    pos = np.asarray(anchor_positions, dtype=float)
    p0 = pos.mean(axis=0)
    mean_dist = np.linalg.norm(pos - p0, axis=1).mean()
    rho = np.atleast_2d(rho)
    theta0 = np.empty((rho.shape[0], pos.shape[1] + 1))
    theta0[:, :-1] = p0
    theta0[:, -1] = mean_dist - C * rho[:, 0]
    return theta0
