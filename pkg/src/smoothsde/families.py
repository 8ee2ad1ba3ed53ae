"""SDE families: transition log-densities and exact path simulation.

Families share a two-parameter layout (a drift-like and a scale-like
parameter per time step) plus optional fixed scalars. Densities are exact
where the family admits one; the Euler density serves as the generic
first-order transition for diagnostics and convergence checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import gammaln

from .errors import UserError

__all__ = [
    "SdeFamily",
    "FAMILIES",
    "get_family",
    "logdens_bm",
    "logdens_gbm",
    "logdens_ou",
    "logdens_euler",
    "logdens_t_increment",
    "t_increment_sd",
    "ctcrw_speed",
    "simulate_path",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


class FamilyError(UserError):
    """Invalid family name or family parameter."""


@dataclass(frozen=True)
class SdeFamily:
    """Static description of one SDE family.

    params are the step-varying parameters in layout order with their links;
    fixed_scalars are user-supplied constants (ν for the t family), while
    estimable_scalars are non-varying parameters estimated in the outer
    optimization (ζ for the OU family). Latent families are fitted through
    the state-space filter rather than a direct transition product.
    """

    name: str
    params: tuple[str, ...]
    links: tuple[str, ...]
    fixed_scalars: tuple[str, ...] = ()
    estimable_scalars: tuple[str, ...] = ()
    latent: bool = False
    positive_state: bool = False
    residual_reference: str | None = "normal"


FAMILIES = {
    "bm": SdeFamily(name="bm", params=("r", "s"), links=("identity", "log")),
    "gbm": SdeFamily(
        name="gbm",
        params=("r", "s"),
        links=("identity", "log"),
        positive_state=True,
    ),
    "ou": SdeFamily(
        name="ou",
        params=("r", "s"),
        links=("log", "log"),
        estimable_scalars=("zeta",),
    ),
    "ctcrw": SdeFamily(
        name="ctcrw",
        params=("r", "s"),
        links=("log", "log"),
        latent=True,
        residual_reference=None,
    ),
    "t": SdeFamily(
        name="t",
        params=("r", "s"),
        links=("identity", "log"),
        fixed_scalars=("nu",),
        residual_reference="t",
    ),
}


def get_family(name: str) -> SdeFamily:
    try:
        return FAMILIES[name]
    except KeyError:
        raise FamilyError(
            f"unknown family {name!r}; choose from {sorted(FAMILIES)}"
        ) from None


def _check_dt(dt) -> np.ndarray:
    dt = np.asarray(dt, dtype=float)
    if np.any(dt <= 0.0) or np.any(~np.isfinite(dt)):
        raise FamilyError("time increments must be positive and finite")
    return dt


def _check_positive(value, name: str) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if np.any(value <= 0.0) or np.any(~np.isfinite(value)):
        raise FamilyError(f"{name} must be positive and finite")
    return value


def logdens_bm(z_from, z_to, dt, r, s):
    """log p(z_to | z_from) for dZ = r dt + s dW over an interval dt."""
    dt = _check_dt(dt)
    s = _check_positive(s, "s")
    var = s**2 * dt
    e = np.asarray(z_to, dtype=float) - np.asarray(z_from, dtype=float) - np.asarray(r, dtype=float) * dt
    return -0.5 * (_LOG_2PI + np.log(var)) - e**2 / (2.0 * var)


def logdens_euler(z_from, z_to, dt, mu, sigma):
    """First-order Gaussian transition: z_to ~ N(z_from + mu dt, sigma^2 dt)."""
    dt = _check_dt(dt)
    sigma = _check_positive(sigma, "sigma")
    var = sigma**2 * dt
    e = np.asarray(z_to, dtype=float) - np.asarray(z_from, dtype=float) - np.asarray(mu, dtype=float) * dt
    return -0.5 * (_LOG_2PI + np.log(var)) - e**2 / (2.0 * var)


def logdens_gbm(z_from, z_to, dt, r, s):
    """Exact GBM transition; -inf for non-positive states.

    Log-increments are Gaussian with mean (r - s^2/2) dt and variance s^2 dt;
    the 1/z_to Jacobian carries the density back to the state scale.
    """
    dt = _check_dt(dt)
    s = _check_positive(s, "s")
    z_from = np.asarray(z_from, dtype=float)
    z_to = np.asarray(z_to, dtype=float)
    r = np.asarray(r, dtype=float)
    ok = (z_from > 0.0) & (z_to > 0.0)
    lf = np.log(np.where(ok, z_from, 1.0))
    lt = np.log(np.where(ok, z_to, 1.0))
    var = s**2 * dt
    e = lt - lf - (r - 0.5 * s**2) * dt
    out = -0.5 * (_LOG_2PI + np.log(var)) - e**2 / (2.0 * var) - lt
    return np.where(ok, out, -np.inf)


def logdens_ou(z_from, z_to, dt, r, s, zeta):
    """Exact OU transition for dZ = r (zeta - Z) dt + s dW."""
    dt = _check_dt(dt)
    r = _check_positive(r, "r")
    s = _check_positive(s, "s")
    zeta = np.asarray(zeta, dtype=float)
    decay = np.exp(-r * dt)
    mean = zeta + decay * (np.asarray(z_from, dtype=float) - zeta)
    var = s**2 / (2.0 * r) * (-np.expm1(-2.0 * r * dt))
    e = np.asarray(z_to, dtype=float) - mean
    return -0.5 * (_LOG_2PI + np.log(var)) - e**2 / (2.0 * var)


def logdens_t_increment(z_from, z_to, dt, r, s_tilde, nu):
    """Student-t increment transition.

    The increment over dt is r dt + s_tilde sqrt(dt) X with X standard t(nu);
    the density carries the 1/(s_tilde sqrt(dt)) Jacobian. nu must exceed 2
    so the increment variance is finite.
    """
    dt = _check_dt(dt)
    s_tilde = _check_positive(s_tilde, "s_tilde")
    nu = float(nu)
    if nu <= 2.0:
        raise FamilyError("nu must be > 2")
    scale = s_tilde * np.sqrt(dt)
    u = (np.asarray(z_to, dtype=float) - np.asarray(z_from, dtype=float) - np.asarray(r, dtype=float) * dt) / scale
    logc = gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi)
    return logc - 0.5 * (nu + 1.0) * np.log1p(u**2 / nu) - np.log(scale)


def t_increment_sd(s_tilde, nu):
    """Increment standard deviation per sqrt(dt): s = s_tilde sqrt(nu/(nu-2))."""
    nu = float(nu)
    if nu <= 2.0:
        raise FamilyError("nu must be > 2")
    return np.asarray(s_tilde, dtype=float) * np.sqrt(nu / (nu - 2.0))


def ctcrw_speed(r, s):
    """Mean speed sqrt(pi) s / (2 sqrt(r)) of the stationary velocity process."""
    r = _check_positive(r, "r")
    s = _check_positive(s, "s")
    return np.sqrt(np.pi) * np.asarray(s, dtype=float) / (2.0 * np.sqrt(r))


# ---------------------------------------------------------------------------
# Path simulation. Exact transition recursions so simulated data do not share
# the estimator's discretization error. Sequential recursions (OU, CTCRW) run
# in numba kernels; increment-driven families vectorize with cumsum.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ou_path(z0, decay, zeta, step_sd, noise):
    n = decay.shape[0]
    out = np.empty(n + 1)
    out[0] = z0
    for i in range(n):
        out[i + 1] = zeta + decay[i] * (out[i] - zeta) + step_sd[i] * noise[i]
    return out


@njit(cache=True)
def _ctcrw_path(z0, v0, T11, T12, T22, L11, L21, L22, noise):
    # State (position, velocity); L is the lower Cholesky factor of Q.
    n = T12.shape[0]
    out = np.empty(n + 1)
    out[0] = z0
    z = z0
    v = v0
    for i in range(n):
        zn = T11 * z + T12[i] * v + L11[i] * noise[i, 0]
        vn = T22[i] * v + L21[i] * noise[i, 0] + L22[i] * noise[i, 1]
        z = zn
        v = vn
        out[i + 1] = z
    return out


def simulate_path(family, theta: dict, dt: float, z0: float, rng, v0: float | None = None):
    """Simulate one path with exact per-step transitions.

    Parameters
    ----------
    family : SdeFamily or name
    theta : dict of per-step parameter arrays (all the same length n)
        Step i's values govern the transition from t_i to t_{i+1}.
    dt : float, step width
    z0 : float, initial state
    rng : numpy Generator (a counter-based Philox stream in this package)
    v0 : initial velocity for the CTCRW family; drawn from the stationary
        velocity law of the first step's parameters when omitted.

    Returns
    -------
    (times, values): arrays of length n + 1.
    """
    fam = get_family(family) if isinstance(family, str) else family
    dt = float(dt)
    if dt <= 0.0:
        raise FamilyError("dt must be positive")
    r = np.asarray(theta["r"], dtype=float)
    s = np.asarray(theta["s"], dtype=float)
    if r.shape != s.shape or r.ndim != 1:
        raise FamilyError("theta arrays must be 1-d and equal length")
    n = r.shape[0]
    times = dt * np.arange(n + 1)
    if fam.name == "bm":
        incr = r * dt + s * np.sqrt(dt) * rng.standard_normal(n)
        return times, z0 + np.concatenate([[0.0], np.cumsum(incr)])
    if fam.name == "gbm":
        if z0 <= 0.0:
            raise FamilyError("GBM needs a positive initial state")
        incr = (r - 0.5 * s**2) * dt + s * np.sqrt(dt) * rng.standard_normal(n)
        return times, z0 * np.exp(np.concatenate([[0.0], np.cumsum(incr)]))
    if fam.name == "t":
        nu = float(theta["nu"]) if "nu" in theta else 3.0
        if nu <= 2.0:
            raise FamilyError("nu must be > 2")
        incr = r * dt + s * np.sqrt(dt) * rng.standard_t(nu, size=n)
        return times, z0 + np.concatenate([[0.0], np.cumsum(incr)])
    if fam.name == "ou":
        _check_positive(r, "r")
        _check_positive(s, "s")
        zeta = float(theta.get("zeta", 0.0))
        decay = np.exp(-r * dt)
        step_sd = np.sqrt(s**2 / (2.0 * r) * (-np.expm1(-2.0 * r * dt)))
        return times, _ou_path(z0, decay, zeta, step_sd, rng.standard_normal(n))
    if fam.name == "ctcrw":
        from .kalman import ctcrw_transition

        _check_positive(r, "r")
        _check_positive(s, "s")
        T, Q = ctcrw_transition(np.full(n, dt), r, s)
        # Closed-form lower Cholesky of each 2x2 Q.
        L11 = np.sqrt(Q[:, 0, 0])
        L21 = Q[:, 1, 0] / L11
        L22 = np.sqrt(np.maximum(Q[:, 1, 1] - L21**2, 0.0))
        if v0 is None:
            v0 = float(np.sqrt(s[0] ** 2 / (2.0 * r[0])) * rng.standard_normal())
        return times, _ctcrw_path(
            float(z0), float(v0), 1.0, T[:, 0, 1], T[:, 1, 1],
            L11, L21, L22, rng.standard_normal((n, 2)),
        )
    raise FamilyError(f"simulation not implemented for family {fam.name!r}")
