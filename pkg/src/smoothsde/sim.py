"""Scenario simulation: covariate paths, fine-grid SDE simulation, thinning.

A scenario simulates an SDE on a fine time grid whose drift and diffusion
vary with a covariate process, then keeps a random subset of observation
times. True parameter curves come from closed-form strings evaluated by a
small arithmetic grammar (or from interpolation tables), so configs stay
plain JSON.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import families as fam
from .data import Dataset
from .errors import UserError

__all__ = [
    "SimError",
    "ScenarioConfig",
    "TrueCurves",
    "parse_curve",
    "simulate_covariate",
    "thin_irregular",
    "run_scenario",
    "default_config",
    "range_normalized_rmse",
]


class SimError(UserError):
    """Invalid simulation configuration or arguments."""


_SAFE_FUNCS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "tanh": np.tanh,
    "abs": np.abs,
}
_SAFE_NAMES = {"pi": np.pi, "e": np.e}
_SAFE_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def _eval_node(node, x):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body, x)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, (int, float)):
            return float(node.value)
        raise SimError(f"non-numeric constant {node.value!r} in curve expression")
    if isinstance(node, ast.Name):
        if node.id == "x":
            return x
        if node.id in _SAFE_NAMES:
            return _SAFE_NAMES[node.id]
        raise SimError(f"unknown name {node.id!r} in curve expression")
    if isinstance(node, ast.BinOp) and type(node.op) in _SAFE_BINOPS:
        return _SAFE_BINOPS[type(node.op)](
            _eval_node(node.left, x), _eval_node(node.right, x)
        )
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_node(node.operand, x)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Call):
        if (
            isinstance(node.func, ast.Name)
            and node.func.id in _SAFE_FUNCS
            and not node.keywords
            and len(node.args) == 1
        ):
            return _SAFE_FUNCS[node.func.id](_eval_node(node.args[0], x))
        name = getattr(node.func, "id", "<call>")
        raise SimError(f"function {name!r} not allowed in curve expression")
    raise SimError(
        f"unsupported syntax {type(node).__name__!r} in curve expression"
    )


def parse_curve(spec):
    """Turn a curve specification into a vectorized function of x.

    Accepts a number (constant curve), a string expression in ``x`` over
    + - * / ** with exp/log/sqrt/sin/cos/tan/tanh/abs and the constants
    pi and e, or a table {"x": [...], "y": [...]} interpolated linearly.
    """
    if isinstance(spec, (int, float)):
        c = float(spec)
        return lambda x: np.full_like(np.asarray(x, dtype=float), c)
    if isinstance(spec, dict):
        xs = np.asarray(spec.get("x"), dtype=float)
        ys = np.asarray(spec.get("y"), dtype=float)
        if xs is None or ys is None or xs.ndim != 1 or xs.shape != ys.shape:
            raise SimError("curve table needs equal-length 'x' and 'y' arrays")
        if np.any(np.diff(xs) <= 0):
            raise SimError("curve table 'x' must be strictly increasing")
        return lambda x: np.interp(np.asarray(x, dtype=float), xs, ys)
    if isinstance(spec, str):
        try:
            tree = ast.parse(spec, mode="eval")
        except SyntaxError as err:
            raise SimError(f"cannot parse curve expression {spec!r}: {err.msg}")
        _eval_node(tree, np.zeros(1))  # validate the whole tree up front
        return lambda x: np.broadcast_to(
            np.asarray(_eval_node(tree, np.asarray(x, dtype=float))),
            np.asarray(x).shape,
        ).astype(float)
    raise SimError(f"cannot interpret curve specification of type {type(spec).__name__}")


def _rng_for(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


def _covariate_raw(n, rng, dt):
    incr = np.sqrt(dt) * rng.standard_normal(n - 1)
    return np.concatenate([[0.0], np.cumsum(incr)])


def simulate_covariate(n, seed, dt=0.01):
    """Driftless Brownian path rescaled to cover [0, 1] exactly.

    Parameters
    ----------
    n : number of points (>= 2)
    seed : integer seed or a numpy Generator
    dt : time step of the underlying Brownian increments

    Returns
    -------
    Array of length n with min exactly 0 and max exactly 1.
    """
    if n < 2:
        raise SimError("covariate path needs n >= 2")
    rng = _rng_for(seed)
    z = _covariate_raw(n, rng, dt)
    lo, hi = z.min(), z.max()
    if hi == lo:  # cannot happen with continuous increments, but stay safe
        return np.linspace(0.0, 1.0, n)
    return (z - lo) / (hi - lo)


def thin_irregular(path, n_keep, seed):
    """Keep a random subset of rows, always retaining the first one.

    path is a mapping of equal-length columns (a DataFrame works); rows are
    returned in time order as a dict of arrays. The first row anchors the
    initial state, the rest are a uniform draw without replacement.
    """
    if isinstance(path, pd.DataFrame):
        cols = {c: path[c].to_numpy() for c in path.columns}
    else:
        cols = {k: np.asarray(v) for k, v in path.items()}
    if not cols:
        raise SimError("empty path")
    n = len(next(iter(cols.values())))
    if any(len(v) != n for v in cols.values()):
        raise SimError("path columns differ in length")
    if n_keep < 2:
        raise SimError("n_keep must be at least 2")
    if n_keep > n:
        raise SimError(f"n_keep = {n_keep} exceeds path length {n}")
    rng = _rng_for(seed)
    rest = rng.choice(np.arange(1, n), size=n_keep - 1, replace=False)
    idx = np.concatenate([[0], np.sort(rest)])
    return {k: v[idx] for k, v in cols.items()}


@dataclass(frozen=True)
class TrueCurves:
    """The generating parameter functions of a scenario, kept for scoring."""

    r: object
    s: object
    r_spec: object = None
    s_spec: object = None

    def on_grid(self, x):
        x = np.asarray(x, dtype=float)
        return {"r": self.r(x), "s": self.s(x)}


_SCENARIOS = {"BM_COVARIATE": "bm", "CTCRW_COVARIATE": "ctcrw"}

_DEFAULT_CURVES = {
    "BM_COVARIATE": {
        "r": "2*exp(-1.2*x)*sin(2*pi*x)",
        "s": "0.6 + 1.2*exp(-(x-0.55)**2/(2*0.18**2))",
    },
    "CTCRW_COVARIATE": {
        "r": "exp(0.2 + 0.9*exp(-1.2*x)*sin(2*pi*x))",
        "s": "0.8 + 1.0*exp(-(x-0.5)**2/(2*0.16**2))",
    },
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    r: object = None
    s: object = None
    dt: float = 0.01
    n_fine: int = 100_000
    n_keep: int = 2000
    seed: int = 0
    covariate_dt: float = field(default=0.01)

    def __post_init__(self):
        if self.scenario not in _SCENARIOS:
            raise SimError(
                f"unknown scenario {self.scenario!r}; expected one of "
                f"{sorted(_SCENARIOS)}"
            )
        if self.dt <= 0:
            raise SimError("dt must be positive")
        if self.n_keep > self.n_fine:
            raise SimError("n_keep cannot exceed n_fine")

    @property
    def family(self) -> str:
        return _SCENARIOS[self.scenario]

    def curves(self) -> TrueCurves:
        r_spec = self.r if self.r is not None else _DEFAULT_CURVES[self.scenario]["r"]
        s_spec = self.s if self.s is not None else _DEFAULT_CURVES[self.scenario]["s"]
        return TrueCurves(
            r=parse_curve(r_spec), s=parse_curve(s_spec),
            r_spec=r_spec, s_spec=s_spec,
        )

    @staticmethod
    def from_dict(d: dict) -> "ScenarioConfig":
        allowed = {"scenario", "r", "s", "dt", "n_fine", "n_keep", "seed",
                   "covariate_dt"}
        extra = set(d) - allowed
        if extra:
            raise SimError(f"unknown scenario config keys {sorted(extra)}")
        if "scenario" not in d:
            raise SimError("scenario config needs a 'scenario' field")
        return ScenarioConfig(**d)


def default_config(scenario, **overrides) -> ScenarioConfig:
    """The standard configuration of a named scenario."""
    return ScenarioConfig(scenario=scenario, **overrides)


def run_scenario(cfg: ScenarioConfig):
    """Simulate one scenario replicate.

    The SDE runs on the fine grid with parameters tied to the covariate at
    the left endpoint of each step; the returned Dataset holds the thinned
    rows. Everything derives from one counter-based stream per seed, so a
    given (config, seed) reproduces bit for bit.

    Returns
    -------
    (Dataset, TrueCurves)
    """
    if isinstance(cfg, dict):
        cfg = ScenarioConfig.from_dict(cfg)
    rng = _rng_for(cfg.seed)
    curves = cfg.curves()
    x1 = simulate_covariate(cfg.n_fine, rng, dt=cfg.covariate_dt)
    theta = {"r": curves.r(x1[:-1]), "s": curves.s(x1[:-1])}
    if np.any(~np.isfinite(theta["r"])) or np.any(~np.isfinite(theta["s"])):
        raise SimError("true curves produced non-finite parameter values")
    cols = {"ID": np.ones(cfg.n_fine, dtype=int)}
    if cfg.family == "ctcrw":
        times, xpos = fam.simulate_path("ctcrw", theta, cfg.dt, 0.0, rng)
        _, ypos = fam.simulate_path("ctcrw", theta, cfg.dt, 0.0, rng)
        cols.update(time=times, x=xpos, y=ypos, x1=x1)
        response = ("x", "y")
    else:
        times, z = fam.simulate_path(cfg.family, theta, cfg.dt, 0.0, rng)
        cols.update(time=times, z=z, x1=x1)
        response = ("z",)
    kept = thin_irregular(cols, cfg.n_keep, rng)
    return Dataset(pd.DataFrame(kept), response=response), curves


def range_normalized_rmse(truth, estimate):
    """RMSE divided by the range of the true values on the same grid."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise SimError("truth and estimate grids differ in length")
    rng_t = truth.max() - truth.min()
    if rng_t <= 0:
        raise SimError("true curve has zero range; cannot normalize")
    return float(np.sqrt(np.mean((estimate - truth) ** 2)) / rng_t)
