"""Residual diagnostics and the interval-coverage experiment harness.

One-step Euler residuals with QQ and autocorrelation summaries for the
directly observed families, and a replicated simulate/fit/score loop that
measures pointwise credible-band coverage against known truth curves.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy import stats

from .basis import FormulaTerm, apply_link, design_rows, linear_predictor
from .data import Dataset
from .errors import NumericalError, SmoothSdeError, UserError
from .families import get_family
from .inference import FitResult, ModelSpec, fit, predict_parameters
from .sim import ScenarioConfig, run_scenario

__all__ = [
    "ResidualSeries",
    "residuals",
    "qq_points",
    "acf",
    "CoverageResult",
    "coverage_experiment",
]


@dataclass(frozen=True)
class ResidualSeries:
    """Standardized per-transition residuals with their reference law.

    reference is "standard-normal" or "student-t"; nu carries the degrees
    of freedom in the latter case. series_ids and times identify the
    from-row of each transition.
    """

    values: np.ndarray
    reference: str
    nu: float | None
    series_ids: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.reference not in ("standard-normal", "student-t"):
            raise UserError(f"unknown reference distribution {self.reference!r}")
        if self.reference == "student-t" and self.nu is None:
            raise UserError("student-t reference needs nu")
        n = self.values.size
        if len(self.series_ids) != n or len(self.times) != n:
            raise UserError("series_ids and times must match the residuals")

    def __len__(self):
        return self.values.size

    def _dist(self):
        if self.reference == "student-t":
            return stats.t(df=self.nu)
        return stats.norm()


def residuals(fit_result: FitResult, data: Dataset) -> ResidualSeries:
    """Standardized one-step residuals under the fitted parameter paths.

    Uses the Euler form (z_next - z - mu dt) / (sigma sqrt(dt)) on each
    family's observation scale: the state itself for bm, ou, and t, and the
    log state for gbm. The reference distribution is standard normal except
    for the t family, whose residuals follow a t with its fixed nu.

    Parameters
    ----------
    fit_result : FitResult
        A fitted model whose formula covariates are present in ``data``.
    data : Dataset
        Rows to score; typically the training data.

    Returns
    -------
    ResidualSeries
        One residual per within-series transition, tagged with the
        reference distribution.
    """
    family = get_family(fit_result.spec.family)
    if family.residual_reference is None:
        raise UserError(
            f"residuals are not defined for the {family.name!r} family: the "
            "state is latent, so one-step residuals have no observed "
            "counterpart"
        )
    X_fe, X_re, _ = design_rows(fit_result.design, data.columns())
    theta = {}
    for p, link in zip(family.params, family.links):
        eta = linear_predictor(
            fit_result.design, fit_result.alpha, fit_result.beta, p, X_fe, X_re
        )
        theta[p] = apply_link(eta, link)
    fr, to, dt = data.transitions()
    if fr.size == 0:
        raise UserError("no transitions: every series has fewer than two rows")
    z = data.column(data.response[0])
    r = theta["r"][fr]
    s = theta["s"][fr]
    scale = s * np.sqrt(dt)
    if family.name == "gbm":
        if np.any(z[fr] <= 0) or np.any(z[to] <= 0):
            raise UserError("gbm residuals need a positive response")
        eps = (np.log(z[to]) - np.log(z[fr]) - (r - 0.5 * s**2) * dt) / scale
    elif family.name == "ou":
        zeta = fit_result.aux["zeta"]
        eps = (z[to] - z[fr] - r * (zeta - z[fr]) * dt) / scale
    else:
        eps = (z[to] - z[fr] - r * dt) / scale
    if not np.all(np.isfinite(eps)):
        bad = int(np.nonzero(~np.isfinite(eps))[0][0])
        raise NumericalError(f"non-finite residual at transition {bad}")
    ids = data.column("ID")[fr]
    times = data.column("time")[fr]
    if family.residual_reference == "t":
        return ResidualSeries(
            eps, "student-t", float(fit_result.spec.fixed["nu"]), ids, times
        )
    return ResidualSeries(eps, "standard-normal", None, ids, times)


def qq_points(res: ResidualSeries) -> pd.DataFrame:
    """Sorted residuals paired with reference quantiles.

    Plotting positions follow the (i - 0.5) / n convention. Returns a frame
    with columns ``theoretical`` and ``empirical``.
    """
    n = len(res)
    if n < 10:
        raise UserError(f"need at least 10 residuals for a QQ table, got {n}")
    emp = np.sort(res.values)
    p = (np.arange(1, n + 1) - 0.5) / n
    theo = res._dist().ppf(p)
    return pd.DataFrame({"theoretical": theo, "empirical": emp})


def acf(res: ResidualSeries, max_lag: int) -> pd.DataFrame:
    """Sample autocorrelations with white-noise reference bounds.

    Mean-centered, normalized so lag 0 equals 1 exactly; the bounds are the
    usual +-1.96 / sqrt(n). Returns a frame with columns ``lag``, ``acf``,
    ``lower``, ``upper``.
    """
    x = res.values
    n = x.size
    max_lag = int(max_lag)
    if max_lag < 0:
        raise UserError("max_lag must be nonnegative")
    if max_lag >= n:
        raise UserError(
            f"max_lag must be smaller than the residual count ({n}), "
            f"got {max_lag}"
        )
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom == 0.0:
        raise UserError("constant residuals have no autocorrelation")
    vals = np.empty(max_lag + 1)
    vals[0] = 1.0
    for k in range(1, max_lag + 1):
        vals[k] = float(xc[k:] @ xc[:-k]) / denom
    bound = 1.96 / np.sqrt(n)
    return pd.DataFrame({
        "lag": np.arange(max_lag + 1),
        "acf": vals,
        "lower": -bound,
        "upper": bound,
    })


# ---------------------------------------------------------------------------
# Coverage experiment
# ---------------------------------------------------------------------------

_SCENARIO_FAMILY = {"BM_COVARIATE": "bm", "CTCRW_COVARIATE": "ctcrw"}


def thread_count() -> int:
    """Worker cap from SMOOTHSDE_THREADS (default 1, meaning inline)."""
    raw = os.environ.get("SMOOTHSDE_THREADS", "1").strip()
    try:
        n = int(raw)
    except ValueError:
        raise UserError(
            f"SMOOTHSDE_THREADS must be a positive integer, got {raw!r}"
        ) from None
    if n < 1:
        raise UserError(f"SMOOTHSDE_THREADS must be a positive integer, got {n}")
    return n


def scenario_model(scenario: str, num_basis: int = 10) -> ModelSpec:
    """The matched varying-coefficient model for a simulation scenario."""
    if scenario not in _SCENARIO_FAMILY:
        raise UserError(f"unknown scenario {scenario!r}")
    return ModelSpec(_SCENARIO_FAMILY[scenario], {
        "r": [FormulaTerm("smooth", covariate="x1", num_basis=num_basis)],
        "s": [FormulaTerm("smooth", covariate="x1", num_basis=num_basis)],
    })


@dataclass(frozen=True)
class CoverageResult:
    """Grid-averaged pointwise coverage per parameter.

    coverage maps parameter name to the average over grid points and
    replicates of the indicator {band contains truth}; per_point keeps the
    per-grid-point averages. Failed replicates are excluded from the
    averages and counted in n_failed.
    """

    coverage: dict
    per_point: dict
    grid: np.ndarray
    level: float
    n_ok: int
    n_failed: int


def _coverage_replicate(task):
    cfg, level, n_draws, grid, num_basis, draw_seed = task
    try:
        data, truth = run_scenario(cfg)
        spec = scenario_model(cfg.scenario, num_basis)
        result = fit(spec, data)
        curves = predict_parameters(
            result, {"x1": grid}, n_draws=n_draws, level=level, seed=draw_seed
        )
    except (SmoothSdeError, np.linalg.LinAlgError):
        return None
    out = {}
    for par, f in (("r", truth.r), ("s", truth.s)):
        tv = f(grid)
        c = curves[par]
        out[par] = (c.lower <= tv) & (tv <= c.upper)
    return out


def coverage_experiment(config, n_replicates: int = 200, level: float = 0.95,
                        n_draws: int = 1000, n_grid: int = 101,
                        num_basis: int = 10) -> CoverageResult:
    """Replicated simulate/fit/score loop for credible-band calibration.

    Each replicate simulates the scenario with an independent seed, fits the
    matched varying-coefficient model, builds pointwise level-``level``
    bands from ``n_draws`` posterior draws on an equispaced covariate grid,
    and records whether each band contains the true curve. Replicates whose
    fit or sampling fails are excluded and counted.

    Replicates run inline unless the SMOOTHSDE_THREADS environment variable
    asks for a process pool.
    """
    cfg = (
        config
        if isinstance(config, ScenarioConfig)
        else ScenarioConfig.from_dict(dict(config))
    )
    if not 0.0 <= level <= 1.0:
        raise UserError(f"nominal level must be in [0, 1], got {level}")
    if n_replicates < 1:
        raise UserError("n_replicates must be at least 1")
    grid = np.linspace(0.0, 1.0, int(n_grid))
    seeds = [
        child.generate_state(2, np.uint64)
        for child in np.random.SeedSequence(cfg.seed).spawn(n_replicates)
    ]
    tasks = [
        (replace(cfg, seed=int(st[0])), level, n_draws, grid, num_basis,
         int(st[1]))
        for st in seeds
    ]
    workers = thread_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_coverage_replicate, tasks))
    else:
        results = [_coverage_replicate(t) for t in tasks]
    kept = [r for r in results if r is not None]
    if not kept:
        raise NumericalError(
            f"all {n_replicates} coverage replicates failed to fit"
        )
    per_point = {
        par: np.mean([r[par] for r in kept], axis=0) for par in kept[0]
    }
    coverage = {par: float(v.mean()) for par, v in per_point.items()}
    return CoverageResult(
        coverage=coverage,
        per_point=per_point,
        grid=grid,
        level=level,
        n_ok=len(kept),
        n_failed=len(results) - len(kept),
    )
