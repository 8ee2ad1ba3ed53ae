"""Linear-Gaussian state-space filtering for latent SDE families.

Covers the integrated-OU position/velocity model behind the correlated
random walk family and any latent-BM-with-linear-observation structure with
per-step matrices. The numpy implementations are the reference path for
arbitrary state and observation dimension; scalar-observation numba kernels
carry the inference hot loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import NumericalError, UserError

__all__ = [
    "StateSpaceModel",
    "ctcrw_transition",
    "kalman_loglik",
    "kalman_filter",
    "kalman_smooth",
    "anchored_filter_start",
    "anchored_smooth_start",
    "em_scores_q1",
]

_LOG_2PI = float(np.log(2.0 * np.pi))

# Below this value of r*dt the closed form for Q11 loses ~6 digits to
# cancellation (three O(x) terms summing to O(x^3)), so a series in x takes
# over. T12, Q12, Q22 are written with expm1 and stay accurate throughout.
_Q11_SERIES_CUTOFF = 1e-3


def ctcrw_transition(dt, r, s):
    """Exact transition matrices of the position/velocity process.

    The velocity V follows dV = -r V dt + s dW and the position integrates
    it. For the state x = (position, velocity) over a step dt:

        x_next = T x + w,  w ~ N(0, Q)

    with T = [[1, (1-e^{-r dt})/r], [0, e^{-r dt}]] and Q the integrated-OU
    covariance. Q11 tends to s^2 dt^3 / 3 as r dt -> 0.

    Parameters are broadcast to a common shape; returns (T, Q) shaped
    (n, 2, 2) for 1-d input (or (2, 2) for scalars).
    """
    dt = np.asarray(dt, dtype=float)
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(dt <= 0.0):
        raise UserError("dt must be positive")
    if np.any(r <= 0.0) or np.any(s <= 0.0):
        raise UserError("r and s must be positive")
    scalar = dt.ndim == 0 and r.ndim == 0 and s.ndim == 0
    dt, r, s = np.broadcast_arrays(np.atleast_1d(dt), np.atleast_1d(r), np.atleast_1d(s))
    # Extreme parameter proposals overflow to inf here; callers treat
    # non-finite matrices as an infeasible point rather than an error.
    with np.errstate(over="ignore", invalid="ignore"):
        x = r * dt
        em = -np.expm1(-x)        # 1 - e^{-x}
        em2 = -np.expm1(-2.0 * x)  # 1 - e^{-2x}
        decay = np.exp(-x)
        n = x.shape[0]
        T = np.zeros((n, 2, 2))
        T[:, 0, 0] = 1.0
        T[:, 0, 1] = em / r
        T[:, 1, 1] = decay
        Q = np.zeros((n, 2, 2))
        Q[:, 1, 1] = s**2 / (2.0 * r) * em2
        Q[:, 0, 1] = s**2 / (2.0 * r**2) * em**2
        Q[:, 1, 0] = Q[:, 0, 1]
        direct = s**2 / r**2 * (dt - 2.0 * em / r + em2 / (2.0 * r))
        series = s**2 * dt**3 * (
            1.0 / 3.0 - x / 4.0 + 7.0 * x**2 / 60.0 - x**3 / 24.0
        )
        Q[:, 0, 0] = np.where(x < _Q11_SERIES_CUTOFF, series, direct)
    if scalar:
        return T[0], Q[0]
    return T, Q


@dataclass
class StateSpaceModel:
    """Per-step matrices of a linear-Gaussian state-space model.

    State recursion   x_{i+1} = T[i] x_i + c[i] + w_i,  w_i ~ N(0, Q[i])
    Observation       y_i = H[i] x_i + d[i] + e_i,      e_i ~ N(0, R[i])
    Initial state     x_0 ~ N(a0, P0)

    T, Q, c have length n-1 (transition into step i+1), H, R, d length n.
    Observation noise may be exactly zero; per-observation noise scaling
    (R[i] = tau^2 / w_i) is expressed by passing the scaled R stack.
    """

    T: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    a0: np.ndarray
    P0: np.ndarray
    c: np.ndarray | None = None
    d: np.ndarray | None = None

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.a0 = np.asarray(self.a0, dtype=float)
        self.P0 = np.asarray(self.P0, dtype=float)
        n, q, dim = self.H.shape
        if self.T.shape != (n - 1, dim, dim) or self.Q.shape != (n - 1, dim, dim):
            raise UserError("T and Q must have shape (n-1, d, d) matching H")
        if self.R.shape != (n, q, q):
            raise UserError("R must have shape (n, q, q)")
        if self.a0.shape != (dim,) or self.P0.shape != (dim, dim):
            raise UserError("a0/P0 shapes do not match the state dimension")
        if self.c is None:
            self.c = np.zeros((n - 1, dim))
        else:
            self.c = np.asarray(self.c, dtype=float)
            if self.c.shape != (n - 1, dim):
                raise UserError("c must have shape (n-1, d)")
        if self.d is None:
            self.d = np.zeros((n, q))
        else:
            self.d = np.asarray(self.d, dtype=float)
            if self.d.shape != (n, q):
                raise UserError("d must have shape (n, q)")

    @property
    def n_steps(self) -> int:
        return self.H.shape[0]

    @property
    def dim_state(self) -> int:
        return self.H.shape[2]

    @property
    def dim_obs(self) -> int:
        return self.H.shape[1]


def _observed_mask(y: np.ndarray) -> np.ndarray:
    # A step counts as observed only when every component is present.
    return ~np.isnan(y).any(axis=1)


def kalman_filter(model: StateSpaceModel, y) -> dict:
    """Forward pass; rows of y with any NaN are treated as missing.

    Returns a dict with loglik, filtered/predicted means and covariances.
    Raises NumericalError when an innovation covariance is not positive
    definite, naming the step.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] == 1 and model.n_steps > 1 and y.shape[1] == model.n_steps:
        y = y.T
    n, q, dim = model.H.shape
    if y.shape != (n, q):
        raise UserError(f"y must have shape ({n}, {q})")
    observed = _observed_mask(y)
    if not observed.any():
        raise UserError("need at least one non-missing observation")
    a = model.a0.copy()
    P = model.P0.copy()
    af = np.empty((n, dim)); Pf = np.empty((n, dim, dim))
    ap = np.empty((n, dim)); Pp = np.empty((n, dim, dim))
    loglik = 0.0
    eye = np.eye(dim)
    for i in range(n):
        if i > 0:
            a = model.T[i - 1] @ a + model.c[i - 1]
            P = model.T[i - 1] @ P @ model.T[i - 1].T + model.Q[i - 1]
        ap[i] = a
        Pp[i] = P
        if observed[i]:
            Hi = model.H[i]
            v = y[i] - Hi @ a - model.d[i]
            F = Hi @ P @ Hi.T + model.R[i]
            F = 0.5 * (F + F.T)
            if not np.all(np.isfinite(F)):
                raise NumericalError(f"non-finite innovation covariance at step {i}")
            try:
                cF = np.linalg.cholesky(F)
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"innovation covariance not positive definite at step {i}"
                ) from None
            sol = np.linalg.solve(cF, v)
            loglik += -0.5 * (
                q * _LOG_2PI + 2.0 * np.sum(np.log(np.diag(cF))) + sol @ sol
            )
            K = P @ Hi.T @ np.linalg.solve(F, np.eye(q))
            a = a + K @ v
            IKH = eye - K @ Hi
            P = IKH @ P @ IKH.T + K @ model.R[i] @ K.T
            P = 0.5 * (P + P.T)
        af[i] = a
        Pf[i] = P
    return {
        "loglik": float(loglik),
        "filtered_mean": af,
        "filtered_cov": Pf,
        "predicted_mean": ap,
        "predicted_cov": Pp,
        "observed": observed,
    }


def kalman_loglik(model: StateSpaceModel, y) -> float:
    """Marginal log-likelihood of the observed rows of y."""
    return kalman_filter(model, y)["loglik"]


def kalman_smooth(model: StateSpaceModel, y) -> dict:
    """RTS smoother; adds smoothed moments and lag-one covariances.

    lag_one[i] is Cov(x_{i+1}, x_i | all observations) = P^s_{i+1} J_i'.
    """
    out = kalman_filter(model, y)
    n, _, dim = model.H.shape
    ms = np.empty((n, dim)); Ps = np.empty((n, dim, dim))
    lag_one = np.empty((max(n - 1, 0), dim, dim))
    ms[n - 1] = out["filtered_mean"][n - 1]
    Ps[n - 1] = out["filtered_cov"][n - 1]
    for i in range(n - 2, -1, -1):
        Pp1 = out["predicted_cov"][i + 1]
        J = out["filtered_cov"][i] @ model.T[i].T @ np.linalg.solve(
            Pp1, np.eye(dim)
        )
        ms[i] = out["filtered_mean"][i] + J @ (ms[i + 1] - out["predicted_mean"][i + 1])
        Ps[i] = out["filtered_cov"][i] + J @ (Ps[i + 1] - Pp1) @ J.T
        Ps[i] = 0.5 * (Ps[i] + Ps[i].T)
        lag_one[i] = Ps[i + 1] @ J.T
    out["smoothed_mean"] = ms
    out["smoothed_cov"] = Ps
    out["lag_one_cov"] = lag_one
    return out


# ---------------------------------------------------------------------------
# Scalar-observation numba kernels for the inference hot loop (d <= 2).
# Layout mirrors the numpy reference; tested against it for agreement.
# ---------------------------------------------------------------------------


@njit(cache=True)
def filter_q1(y, observed, T, Q, c, H, R, a0, P0):
    """Filter with scalar observations. y: (n,), H: (n, d), R: (n,).

    Returns (status, loglik, af, Pf, ap, Pp); status is the 1-based step of
    a non-positive innovation variance, 0 on success.
    """
    n = y.shape[0]
    d = a0.shape[0]
    af = np.zeros((n, d)); Pf = np.zeros((n, d, d))
    ap = np.zeros((n, d)); Pp = np.zeros((n, d, d))
    a = a0.copy()
    P = P0.copy()
    loglik = 0.0
    TP = np.zeros((d, d))
    for i in range(n):
        if i > 0:
            Ti = T[i - 1]
            an = np.zeros(d)
            for j in range(d):
                acc = c[i - 1, j]
                for k in range(d):
                    acc += Ti[j, k] * a[k]
                an[j] = acc
            for j in range(d):
                for k in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += Ti[j, l] * P[l, k]
                    TP[j, k] = acc
            for j in range(d):
                for k in range(d):
                    acc = Q[i - 1, j, k]
                    for l in range(d):
                        acc += TP[j, l] * Ti[k, l]
                    P[j, k] = acc
            a = an
        for j in range(d):
            ap[i, j] = a[j]
            for k in range(d):
                Pp[i, j, k] = P[j, k]
        if observed[i]:
            v = y[i]
            F = R[i]
            for j in range(d):
                v -= H[i, j] * a[j]
                for k in range(d):
                    F += H[i, j] * P[j, k] * H[i, k]
            if not np.isfinite(F) or F <= 0.0:
                return i + 1, 0.0, af, Pf, ap, Pp
            loglik += -0.5 * (_LOG_2PI + np.log(F) + v * v / F)
            K = np.zeros(d)
            for j in range(d):
                acc = 0.0
                for k in range(d):
                    acc += P[j, k] * H[i, k]
                K[j] = acc / F
            for j in range(d):
                a[j] += K[j] * v
            # Joseph update keeps P symmetric PSD with R possibly zero.
            IKH = np.zeros((d, d))
            for j in range(d):
                for k in range(d):
                    IKH[j, k] = (1.0 if j == k else 0.0) - K[j] * H[i, k]
            for j in range(d):
                for k in range(d):
                    acc = 0.0
                    for l in range(d):
                        acc += IKH[j, l] * P[l, k]
                    TP[j, k] = acc
            for j in range(d):
                for k in range(d):
                    acc = R[i] * K[j] * K[k]
                    for l in range(d):
                        acc += TP[j, l] * IKH[k, l]
                    P[j, k] = acc
        for j in range(d):
            af[i, j] = a[j]
            for k in range(d):
                Pf[i, j, k] = P[j, k]
    return 0, loglik, af, Pf, ap, Pp


@njit(cache=True)
def smooth_q1(T, af, Pf, ap, Pp):
    """RTS backward pass for d <= 2; returns (ms, Ps, lag_one)."""
    n = af.shape[0]
    d = af.shape[1]
    ms = np.zeros((n, d)); Ps = np.zeros((n, d, d))
    lag = np.zeros((n - 1 if n > 1 else 0, d, d))
    for j in range(d):
        ms[n - 1, j] = af[n - 1, j]
        for k in range(d):
            Ps[n - 1, j, k] = Pf[n - 1, j, k]
    Jm = np.zeros((d, d))
    tmp = np.zeros((d, d))
    for i in range(n - 2, -1, -1):
        # J = Pf[i] T[i]' inv(Pp[i+1]), with the small inverse in closed form.
        P1 = Pp[i + 1]
        if d == 1:
            inv00 = 1.0 / P1[0, 0]
            Jm[0, 0] = Pf[i, 0, 0] * T[i, 0, 0] * inv00
        else:
            det = P1[0, 0] * P1[1, 1] - P1[0, 1] * P1[1, 0]
            i00 = P1[1, 1] / det
            i01 = -P1[0, 1] / det
            i11 = P1[0, 0] / det
            for j in range(d):
                b0 = 0.0
                b1 = 0.0
                for l in range(d):
                    b0 += Pf[i, j, l] * T[i, 0, l]
                    b1 += Pf[i, j, l] * T[i, 1, l]
                Jm[j, 0] = b0 * i00 + b1 * i01
                Jm[j, 1] = b0 * i01 + b1 * i11
        for j in range(d):
            acc = af[i, j]
            for l in range(d):
                acc += Jm[j, l] * (ms[i + 1, l] - ap[i + 1, l])
            ms[i, j] = acc
        for j in range(d):
            for k in range(d):
                acc = 0.0
                for l in range(d):
                    acc += Jm[j, l] * (Ps[i + 1, l, k] - Pp[i + 1, l, k])
                tmp[j, k] = acc
        for j in range(d):
            for k in range(d):
                acc = Pf[i, j, k]
                for l in range(d):
                    acc += tmp[j, l] * Jm[k, l]
                Ps[i, j, k] = acc
        for j in range(d):
            for k in range(j + 1, d):
                avg = 0.5 * (Ps[i, j, k] + Ps[i, k, j])
                Ps[i, j, k] = avg
                Ps[i, k, j] = avg
        for j in range(d):
            for k in range(d):
                acc = 0.0
                for l in range(d):
                    acc += Ps[i + 1, j, l] * Jm[k, l]
                lag[i, j, k] = acc
    return ms, Ps, lag


def anchored_filter_start(T0, Q0, y0, y1, P_inf):
    """Stable filtered moments through the first two exact position fixes.

    With prior N((y0, 0), P_inf * I) and noiseless position observations,
    the step-0 update collapses the position exactly: filtered state
    (y0, 0) with covariance diag(0, P_inf). The textbook step-1 update then
    subtracts O(P_inf)-sized products and loses about P_inf * eps of
    absolute accuracy in the filtered covariance; that noise rides through
    the smoother into transition scores. Grouping the P_inf terms before
    any subtraction leaves ratios of same-sign sums that stay accurate for
    arbitrarily large P_inf.

    Returns (loglik, af1, Pf1): the combined log-likelihood contribution of
    the two observations, and the step-1 filtered mean and covariance.
    The filtered position variance and cross term are exactly zero, and

        Pf1[1, 1] = (P_inf * v'adj(Q0)v + det Q0) / (P_inf * v0^2 + Q0[0,0])

    with v = T0[:, 1] the diffuse direction pushed through one transition.
    """
    T0 = np.asarray(T0, dtype=float)
    Q0 = np.asarray(Q0, dtype=float)
    v = T0[:, 1]
    F1 = P_inf * v[0] ** 2 + Q0[0, 0]
    innov = y1 - y0
    ll = -0.5 * (_LOG_2PI + np.log(P_inf))
    ll += -0.5 * (_LOG_2PI + np.log(F1) + innov * innov / F1)
    k1 = (P_inf * v[1] * v[0] + Q0[1, 0]) / F1
    af1 = np.array([y1, k1 * innov])
    det = Q0[0, 0] * Q0[1, 1] - Q0[0, 1] * Q0[1, 0]
    vadjv = (
        Q0[1, 1] * v[0] ** 2
        - 2.0 * Q0[0, 1] * v[0] * v[1]
        + Q0[0, 0] * v[1] ** 2
    )
    p11 = (P_inf * vadjv + det) / F1
    Pf1 = np.array([[0.0, 0.0], [0.0, p11]])
    return ll, af1, Pf1


@njit(cache=True)
def em_scores_q1(T, Q, dTdr, dQdr, ms, Ps, lag):
    """Per-transition scores d loglik / d r and d loglik / d s via the
    Fisher identity on smoothed moments.

    For each step k with transition x_{k+1} = T_k x_k + w, w ~ N(0, Q_k):

        dL/dT = Qi (A - T B),  dL/dQ = (Qi M Qi - Qi) / 2
        A = lag_k + m_{k+1} m_k',  B = Ps_k + m_k m_k',
        C = Ps_{k+1} + m_{k+1} m_{k+1}',  M = C - A T' - T A' + T B T'

    and dr_k = <dL/dT, dT/dr> + <dL/dQ, dQ/dr>, ds_k = 2 <dL/dQ, Q> / s
    without the trailing 1/s (the caller works on the log scale where
    d/d log s = 2 <dL/dQ, Q>, since Q scales as s^2 and T is free of s).

    Returns (dr, ds) of length K = T.shape[0].
    """
    K = T.shape[0]
    dr = np.zeros(K)
    ds = np.zeros(K)
    for k in range(K):
        m00 = ms[k, 0]
        m01 = ms[k, 1]
        m10 = ms[k + 1, 0]
        m11 = ms[k + 1, 1]
        a00 = lag[k, 0, 0] + m10 * m00
        a01 = lag[k, 0, 1] + m10 * m01
        a10 = lag[k, 1, 0] + m11 * m00
        a11 = lag[k, 1, 1] + m11 * m01
        b00 = Ps[k, 0, 0] + m00 * m00
        b01 = Ps[k, 0, 1] + m00 * m01
        b11 = Ps[k, 1, 1] + m01 * m01
        c00 = Ps[k + 1, 0, 0] + m10 * m10
        c01 = Ps[k + 1, 0, 1] + m10 * m11
        c11 = Ps[k + 1, 1, 1] + m11 * m11
        t00 = T[k, 0, 0]
        t01 = T[k, 0, 1]
        t10 = T[k, 1, 0]
        t11 = T[k, 1, 1]
        q00 = Q[k, 0, 0]
        q01 = Q[k, 0, 1]
        q11 = Q[k, 1, 1]
        det = q00 * q11 - q01 * q01
        qi00 = q11 / det
        qi01 = -q01 / det
        qi11 = q00 / det
        tb00 = t00 * b00 + t01 * b01
        tb01 = t00 * b01 + t01 * b11
        tb10 = t10 * b00 + t11 * b01
        tb11 = t10 * b01 + t11 * b11
        am00 = a00 - tb00
        am01 = a01 - tb01
        am10 = a10 - tb10
        am11 = a11 - tb11
        dlt00 = qi00 * am00 + qi01 * am10
        dlt01 = qi00 * am01 + qi01 * am11
        dlt10 = qi01 * am00 + qi11 * am10
        dlt11 = qi01 * am01 + qi11 * am11
        at00 = a00 * t00 + a01 * t01
        at01 = a00 * t10 + a01 * t11
        at10 = a10 * t00 + a11 * t01
        at11 = a10 * t10 + a11 * t11
        tbt00 = tb00 * t00 + tb01 * t01
        tbt01 = tb00 * t10 + tb01 * t11
        tbt10 = tb10 * t00 + tb11 * t01
        tbt11 = tb10 * t10 + tb11 * t11
        mm00 = c00 - 2.0 * at00 + tbt00
        mm01 = c01 - at01 - at10 + 0.5 * (tbt01 + tbt10)
        mm11 = c11 - 2.0 * at11 + tbt11
        qm00 = qi00 * mm00 + qi01 * mm01
        qm01 = qi00 * mm01 + qi01 * mm11
        qm10 = qi01 * mm00 + qi11 * mm01
        qm11 = qi01 * mm01 + qi11 * mm11
        dq00 = 0.5 * (qm00 * qi00 + qm01 * qi01 - qi00)
        dq01 = 0.5 * (qm00 * qi01 + qm01 * qi11 - qi01)
        dq11 = 0.5 * (qm10 * qi01 + qm11 * qi11 - qi11)
        dr[k] = (
            dlt00 * dTdr[k, 0, 0]
            + dlt01 * dTdr[k, 0, 1]
            + dlt10 * dTdr[k, 1, 0]
            + dlt11 * dTdr[k, 1, 1]
            + dq00 * dQdr[k, 0, 0]
            + 2.0 * dq01 * dQdr[k, 0, 1]
            + dq11 * dQdr[k, 1, 1]
        )
        ds[k] = 2.0 * (dq00 * q00 + 2.0 * dq01 * q01 + dq11 * q11)
    return dr, ds


def anchored_smooth_start(T0, Q0, af0, P_inf, ms1, Ps1, ap1):
    """Stable smoothed moments at an exactly anchored first state.

    When the first position is observed without noise under a diag(P_inf)
    prior, the step-0 filtered covariance is diag(0, P_inf) and the plain
    backward recursion subtracts O(P_inf)-sized terms, losing ~P_inf*eps of
    absolute accuracy. This closed form (Sherman-Morrison on the one diffuse
    direction) involves only sums of positives and stays accurate, so the
    smoothed moments feeding score computations are reliable at step 0.

    Returns (ms0, Ps0, lag0) with lag0 = Cov(x_1, x_0 | all observations).
    """
    T0 = np.asarray(T0, dtype=float)
    Q0 = np.asarray(Q0, dtype=float)
    v = T0[:, 1]
    det = Q0[0, 0] * Q0[1, 1] - Q0[0, 1] * Q0[1, 0]
    w = np.array([
        (Q0[1, 1] * v[0] - Q0[0, 1] * v[1]) / det,
        (Q0[0, 0] * v[1] - Q0[1, 0] * v[0]) / det,
    ])
    gamma = v @ w
    c = (P_inf / (1.0 + P_inf * gamma)) * w  # second row of the smoother gain
    ms0 = np.array([af0[0], af0[1] + c @ (np.asarray(ms1, float) - np.asarray(ap1, float))])
    var_w = P_inf / (1.0 + P_inf * gamma) + c @ np.asarray(Ps1, float) @ c
    Ps0 = np.array([[0.0, 0.0], [0.0, var_w]])
    lag0 = np.zeros((2, 2))
    lag0[:, 1] = np.asarray(Ps1, float) @ c
    return ms0, Ps0, lag0
