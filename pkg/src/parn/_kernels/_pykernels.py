"""Pure-Python/numpy reference kernels.

Same contract as the compiled ``_ckernels`` module; used when the extension
is not built or ``PARN_PURE_PYTHON`` is set.
"""
import numpy as np

STATUS_OK = 0
STATUS_MAXITER = 1
STATUS_DEGENERATE = 2
STATUS_ILLCOND = 3

COND_LIMIT = 1e12


def kalman_track(z, has_z, t_meas, t_target, x0, p0, t0, s_b, s_omega, sigma2):
    """Run the 2-state clock filter over a measurement sequence.

    Row ``k`` optionally updates with ``z[k]`` taken at ``t_meas[k]`` and then
    predicts (without touching the state) to ``t_target[k]``.

    Returns ``(x_post, p_post, prior00, innov, b_pred, var_pred)`` where
    ``p_post`` holds (P00, P01, P11) per row.
    """
    n = len(z)
    x_post = np.empty((n, 2))
    p_post = np.empty((n, 3))
    prior00 = np.full(n, np.nan)
    innov = np.full(n, np.nan)
    b_pred = np.empty(n)
    var_pred = np.empty(n)

    b, w = float(x0[0]), float(x0[1])
    p00, p01, p11 = float(p0[0][0]), float(p0[0][1]), float(p0[1][1])
    t_last = float(t0)
    for k in range(n):
        if has_z[k]:
            dt = t_meas[k] - t_last
            # prediction: Phi x, Phi P Phi' + Q
            b = b + w * dt
            q00 = s_b * dt + s_omega * dt**3 / 3.0
            q01 = s_omega * dt**2 / 2.0
            q11 = s_omega * dt
            a00 = p00 + 2.0 * dt * p01 + dt * dt * p11 + q00
            a01 = p01 + dt * p11 + q01
            a11 = p11 + q11
            prior00[k] = a00
            # scalar innovation variance is the only division
            s = a00 + sigma2
            k0 = a00 / s
            k1 = a01 / s
            nu = z[k] - b
            innov[k] = nu
            b = b + k0 * nu
            w = w + k1 * nu
            # P = (I - K H) P_prior
            p00 = (1.0 - k0) * a00
            p01 = (1.0 - k0) * a01
            p11 = a11 - k1 * a01
            t_last = t_meas[k]
        x_post[k] = b, w
        p_post[k] = p00, p01, p11
        dt = t_target[k] - t_last
        b_pred[k] = b + w * dt
        var_pred[k] = (
            p00 + 2.0 * dt * p01 + dt * dt * p11 + s_b * dt + s_omega * dt**3 / 3.0
        )
    return x_post, p_post, prior00, innov, b_pred, var_pred


def _solve_one(anchors, offsets, sign, w, meas, theta, max_iter, tol):
    n_dim = anchors.shape[1]
    iters = 0
    status = STATUS_MAXITER
    for _ in range(max_iter):
        diff = anchors - theta[:n_dim]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        if np.any(dist == 0.0):
            return theta, None, iters, np.nan, STATUS_DEGENERATE
        g = np.empty((len(meas), n_dim + 1))
        g[:, :n_dim] = -diff / dist[:, None]
        g[:, n_dim] = sign
        r = meas - (dist + offsets + sign * theta[n_dim])
        gw = g.T * w
        f = gw @ g
        eig = np.linalg.eigvalsh(f)
        if eig[0] <= 0.0 or eig[-1] > COND_LIMIT * eig[0]:
            return theta, None, iters, np.nan, STATUS_ILLCOND
        l_f = np.linalg.cholesky(f)
        rhs = gw @ r
        step = np.linalg.solve(l_f.T, np.linalg.solve(l_f, rhs))
        theta = theta + step
        iters += 1
        if np.sqrt(step @ step) < tol:
            status = STATUS_OK
            break

    diff = anchors - theta[:n_dim]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if np.any(dist == 0.0):
        return theta, None, iters, np.nan, STATUS_DEGENERATE
    g = np.empty((len(meas), n_dim + 1))
    g[:, :n_dim] = -diff / dist[:, None]
    g[:, n_dim] = sign
    r = meas - (dist + offsets + sign * theta[n_dim])
    f = (g.T * w) @ g
    eig = np.linalg.eigvalsh(f)
    if eig[0] <= 0.0 or eig[-1] > COND_LIMIT * eig[0]:
        return theta, None, iters, float(np.sqrt(r @ r)), STATUS_ILLCOND
    l_f = np.linalg.cholesky(f)
    l_inv = np.linalg.solve(l_f, np.eye(n_dim + 1))
    cov = l_inv.T @ l_inv
    return theta, cov, iters, float(np.sqrt(r @ r)), status


def gauss_newton_batch(anchors, offsets, sign, w, meas, theta0, max_iter, tol):
    """Solve a batch of range-plus-offset WLS problems by Gauss-Newton.

    Row ``k`` of problem ``t`` models
    ``meas[t,k] = ||anchors[t,k] - p|| + offsets[t,k] + sign[k] * cb``.

    Returns ``(theta, cov, iterations, residual_norm, status)``. ``cov`` rows
    are NaN when the problem ended degenerate or ill-conditioned.
    """
    anchors = np.asarray(anchors, dtype=float)
    n_batch, _, n_dim = anchors.shape
    theta_out = np.empty((n_batch, n_dim + 1))
    cov_out = np.full((n_batch, n_dim + 1, n_dim + 1), np.nan)
    iters_out = np.zeros(n_batch, dtype=np.int64)
    resid_out = np.full(n_batch, np.nan)
    status_out = np.zeros(n_batch, dtype=np.int64)
    sign = np.asarray(sign, dtype=float)
    for t in range(n_batch):
        theta, cov, it, res, st = _solve_one(
            anchors[t], offsets[t], sign, w[t], meas[t],
            np.array(theta0[t], dtype=float), max_iter, tol,
        )
        theta_out[t] = theta
        if cov is not None:
            cov_out[t] = cov
        iters_out[t] = it
        resid_out[t] = res
        status_out[t] = st
    return theta_out, cov_out, iters_out, resid_out, status_out
