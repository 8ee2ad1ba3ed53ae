"""Command-line front end: simulate, fit, and diagnose models from JSON configs.

Every subcommand reads one JSON config, writes its artifacts into an output
directory, and leaves a manifest recording the seed, a hash of the config,
and package versions. Runs are reproducible byte for byte: floats are
written at 17 significant digits, files go through a temp-then-rename, and
nothing records clocks or hostnames.

Exit codes: 0 success, 1 numerical failure, 2 user-input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .basis import FormulaTerm
from .data import ingest_csv
from .diagnostics import acf, coverage_experiment, qq_points, residuals
from .errors import NumericalError, UserError
from .families import ctcrw_speed, get_family
from .inference import (
    FitResult,
    ModelSpec,
    fit,
    parameter_draws,
    posterior_samples,
    predict_parameters,
)
from .sim import ScenarioConfig, run_scenario

__all__ = ["main"]


# ---------------------------------------------------------------------------
# Config and file plumbing.
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise UserError(f"{path}: no such config file") from None
    except IsADirectoryError:
        raise UserError(f"{path}: is a directory, not a config file") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise UserError(
            f"{path}: malformed JSON at line {err.lineno} column {err.colno} "
            f"({err.msg})"
        ) from None
    if not isinstance(cfg, dict):
        raise UserError(f"{path}: config must be a JSON object")
    return cfg


def _check_keys(cfg: dict, allowed, where="config") -> None:
    extra = sorted(set(cfg) - set(allowed))
    if extra:
        raise UserError(
            f"unknown {where} keys {extra}; allowed: {sorted(allowed)}"
        )


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: str, payload) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: str, frame: pd.DataFrame) -> None:
    _atomic_write(path, frame.to_csv(index=False, float_format="%.17g"))


def _config_hash(cfg: dict) -> str:
    # The output directory does not influence what gets computed, so runs
    # into different directories hash the same.
    content = {k: v for k, v in cfg.items() if k != "out"}
    text = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_manifest(out_dir, command, cfg, seed, outputs) -> None:
    _write_json(os.path.join(out_dir, "manifest.json"), {
        "command": command,
        "config_sha256": _config_hash(cfg),
        "seed": int(seed),
        "package": {"name": "smoothsde", "version": __version__},
        "versions": {
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": sorted(outputs) + ["manifest.json"],
    })


# ---------------------------------------------------------------------------
# Model configuration.
# ---------------------------------------------------------------------------


def _model_spec(cfg: dict) -> ModelSpec:
    model = cfg.get("model")
    if not isinstance(model, dict):
        raise UserError("config needs a 'model' object")
    _check_keys(model, {"family", "formulas", "fixed", "priors"}, "model")
    if "family" not in model:
        raise UserError("model needs a 'family'")
    formulas_cfg = model.get("formulas")
    if not isinstance(formulas_cfg, dict):
        raise UserError(
            "model needs 'formulas': one list of terms per SDE parameter"
        )
    formulas = {}
    for par, terms in formulas_cfg.items():
        if not isinstance(terms, list):
            raise UserError(f"formula for {par!r} must be a list of terms")
        parsed = []
        for t in terms:
            if not isinstance(t, dict):
                raise UserError(
                    f"terms in the formula for {par!r} must be objects "
                    "with a 'kind'"
                )
            parsed.append(FormulaTerm.from_dict(t))
        formulas[par] = parsed
    return ModelSpec(
        family=model["family"],
        formulas=formulas,
        fixed=dict(model.get("fixed", {})),
        priors=dict(model.get("priors", {})),
    )


def _referenced_columns(spec: ModelSpec) -> list:
    cols = []
    for terms in spec.formulas.values():
        for t in terms:
            name = t.covariate if t.kind in ("linear", "smooth") else t.factor
            if name and name not in cols:
                cols.append(name)
    return cols


def _load_fit(cfg) -> FitResult:
    path = cfg.get("fit")
    if not path:
        raise UserError("config needs 'fit': path to a saved fit.json")
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise UserError(f"{path}: no such fit file") from None
    except json.JSONDecodeError as err:
        raise UserError(
            f"{path}: malformed JSON at line {err.lineno} column {err.colno} "
            f"({err.msg})"
        ) from None
    try:
        return FitResult.from_dict(payload)
    except (KeyError, TypeError, ValueError) as err:
        raise UserError(f"{path}: not a saved fit ({err})") from None


# ---------------------------------------------------------------------------
# Curve tables.
# ---------------------------------------------------------------------------


def _smooth_ranges(fit_result: FitResult) -> dict:
    """Training range per smooth covariate, in first-appearance order."""
    ranges = {}
    for b in fit_result.design.re_blocks:
        if b.kind == "smooth":
            m = b.meta
            lo, hi = ranges.get(m.covariate, (m.lo, m.hi))
            ranges[m.covariate] = (min(lo, m.lo), max(hi, m.hi))
    return ranges


def _params_using(fit_result: FitResult, covariate: str) -> list:
    ds = fit_result.design
    used = set()
    for b in ds.fe_blocks:
        if b.kind == "linear" and b.label.split(".", 1)[1] == covariate:
            used.add(b.param)
    for b in ds.re_blocks:
        if b.kind == "smooth" and b.meta.covariate == covariate:
            used.add(b.param)
    return [p for p in ds.param_names if p in used]


def _default_tables(fit_result: FitResult, n_points: int) -> list:
    """Covariate grids for the standard curve output.

    One table per smooth covariate, spanning its training range with the
    other covariates held at their range midpoints (zero for plain linear
    covariates, which store no range). Parameters no table covers get a
    single intercept-level row.
    """
    ds = fit_result.design
    ranges = _smooth_ranges(fit_result)
    centers = {c: 0.5 * (lo + hi) for c, (lo, hi) in ranges.items()}
    for b in ds.fe_blocks:
        if b.kind == "linear":
            centers.setdefault(b.label.split(".", 1)[1], 0.0)
    tables = []
    for c, (lo, hi) in ranges.items():
        x = np.linspace(lo, hi, n_points)
        table = {k: np.full(n_points, v) for k, v in centers.items()}
        table[c] = x
        tables.append((c, table, x, _params_using(fit_result, c)))
    covered = {p for t in tables for p in t[3]}
    rest = [p for p in ds.param_names if p not in covered]
    if rest:
        table = {k: np.full(1, v) for k, v in centers.items()}
        tables.append(("", table, np.zeros(1), rest))
    return tables


def _speed_bands(fit_result, table, draws, level, est):
    if level >= 1.0:
        return np.zeros_like(est), np.full_like(est, np.inf)
    if level <= 0.0 or len(draws) == 0:
        return est.copy(), est.copy()
    th = parameter_draws(fit_result, table, draws)
    sp = ctcrw_speed(th["r"], th["s"])
    q = 0.5 * (1.0 - level)
    return np.quantile(sp, q, axis=0), np.quantile(sp, 1.0 - q, axis=0)


def _curves_frame(fit_result, tables, draws, level) -> pd.DataFrame:
    family = get_family(fit_result.spec.family)
    frames = []
    for covariate, table, x, params in tables:
        curves = predict_parameters(fit_result, table, level=level, draws=draws)
        for p in params:
            c = curves[p]
            frames.append(pd.DataFrame({
                "param": p,
                "covariate": covariate,
                "x": x,
                "estimate": c.estimate,
                "lower": c.lower,
                "upper": c.upper,
                "extrapolated": c.extrapolated.astype(int),
            }))
        if family.name == "ctcrw":
            # Derived mean speed of the stationary velocity process; bands
            # push the joint (r, s) draws through the same transform.
            est = ctcrw_speed(curves["r"].estimate, curves["s"].estimate)
            lo, hi = _speed_bands(fit_result, table, draws, level, est)
            frames.append(pd.DataFrame({
                "param": "speed",
                "covariate": covariate,
                "x": x,
                "estimate": est,
                "lower": lo,
                "upper": hi,
                "extrapolated": curves["r"].extrapolated.astype(int),
            }))
    columns = ["param", "covariate", "x", "estimate", "lower", "upper",
               "extrapolated"]
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)[columns]


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_fit(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"data", "model", "optimizer", "curves", "out", "seed"})
    spec = _model_spec(cfg)
    if "data" not in cfg:
        raise UserError("fit config needs 'data': path to a CSV file")
    data = ingest_csv(cfg["data"], family=spec.family,
                      covariates=_referenced_columns(spec))
    optimizer = dict(cfg.get("optimizer", {}))
    _check_keys(optimizer, {"outer_maxiter", "ftol"}, "optimizer")
    curves_cfg = dict(cfg.get("curves", {}))
    _check_keys(curves_cfg, {"points", "draws", "level"}, "curves")
    n_points = int(curves_cfg.get("points", 101))
    n_draws = int(curves_cfg.get("draws", 1000))
    level = float(curves_cfg.get("level", 0.95))
    seed = int(cfg.get("seed", 0))
    trace = []
    try:
        result = fit(
            spec, data,
            outer_maxiter=int(optimizer.get("outer_maxiter", 200)),
            ftol=float(optimizer.get("ftol", 1e-7)),
            trace=trace,
        )
    except NumericalError as err:
        _write_json(os.path.join(out_dir, "diagnostics.json"),
                    {"error": str(err), "trace": trace})
        _write_manifest(out_dir, "fit", cfg, seed, ["diagnostics.json"])
        print(f"error: {err}", file=sys.stderr)
        return 1
    outputs = ["fit.json", "curves.csv"]
    _write_json(os.path.join(out_dir, "fit.json"), result.to_dict())
    draws = posterior_samples(result, n_draws, seed=seed)
    tables = _default_tables(result, n_points)
    _write_csv(os.path.join(out_dir, "curves.csv"),
               _curves_frame(result, tables, draws, level))
    if not result.converged:
        _write_json(os.path.join(out_dir, "diagnostics.json"), {
            "error": "optimizer did not converge",
            "message": result.message,
            "outer_iterations": result.outer_iterations,
            "marginal_nll": result.marginal_nll,
            "trace": trace,
        })
        outputs.append("diagnostics.json")
    _write_manifest(out_dir, "fit", cfg, seed, outputs)
    if not result.converged:
        print(f"error: fit did not converge: {result.message}",
              file=sys.stderr)
        return 1
    print(
        f"fit: {result.n_obs} rows, marginal NLL {result.marginal_nll:.6f}, "
        f"AIC {result.aic:.6f}, {result.outer_iterations} outer iterations"
    )
    return 0


def cmd_simulate(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"scenario", "truth_points", "out", "seed"})
    sc = cfg.get("scenario")
    if not isinstance(sc, dict):
        raise UserError("simulate config needs a 'scenario' object")
    sc = dict(sc)
    if "seed" in cfg:
        sc["seed"] = int(cfg["seed"])
    scenario = ScenarioConfig.from_dict(sc)
    data, curves = run_scenario(scenario)
    x = np.linspace(0.0, 1.0, int(cfg.get("truth_points", 201)))
    vals = curves.on_grid(x)
    truth = pd.concat(
        [pd.DataFrame({"param": p, "x": x, "value": vals[p]})
         for p in ("r", "s")],
        ignore_index=True,
    )
    _write_csv(os.path.join(out_dir, "data.csv"), data.df)
    _write_csv(os.path.join(out_dir, "truth.csv"), truth)
    _write_manifest(out_dir, "simulate", cfg, scenario.seed,
                    ["data.csv", "truth.csv"])
    print(f"simulate: {scenario.scenario} wrote {data.n} rows")
    return 0


def cmd_residuals(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"fit", "data", "max_lag", "out", "seed"})
    result = _load_fit(cfg)
    if "data" not in cfg:
        raise UserError("residuals config needs 'data': path to a CSV file")
    data = ingest_csv(cfg["data"], family=result.spec.family,
                      covariates=_referenced_columns(result.spec))
    res = residuals(result, data)
    table = pd.DataFrame({
        "ID": res.series_ids,
        "time": res.times,
        "residual": res.values,
    })
    max_lag = int(cfg.get("max_lag", min(40, len(res) - 1)))
    _write_csv(os.path.join(out_dir, "residuals.csv"), table)
    _write_csv(os.path.join(out_dir, "qq.csv"), qq_points(res))
    _write_csv(os.path.join(out_dir, "acf.csv"), acf(res, max_lag))
    _write_manifest(out_dir, "residuals", cfg, int(cfg.get("seed", 0)),
                    ["residuals.csv", "qq.csv", "acf.csv"])
    print(f"residuals: {len(res)} transitions, reference {res.reference}")
    return 0


def _read_table(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except FileNotFoundError:
        raise UserError(f"{path}: no such table file") from None
    except pd.errors.EmptyDataError:
        raise UserError(f"{path}: empty table file") from None


def cmd_predict(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"fit", "table", "points", "draws", "level", "out",
                      "seed"})
    result = _load_fit(cfg)
    n_draws = int(cfg.get("draws", 1000))
    level = float(cfg.get("level", 0.95))
    seed = int(cfg.get("seed", 0))
    draws = posterior_samples(result, n_draws, seed=seed)
    family = get_family(result.spec.family)
    if "table" in cfg:
        tbl = _read_table(cfg["table"])
        curves = predict_parameters(result, tbl, level=level, draws=draws)
        frames = []
        for p in family.params:
            c = curves[p]
            f = tbl.copy()
            f.insert(0, "param", p)
            f["estimate"] = c.estimate
            f["lower"] = c.lower
            f["upper"] = c.upper
            f["extrapolated"] = c.extrapolated.astype(int)
            frames.append(f)
        if family.name == "ctcrw":
            est = ctcrw_speed(curves["r"].estimate, curves["s"].estimate)
            lo, hi = _speed_bands(result, tbl, draws, level, est)
            f = tbl.copy()
            f.insert(0, "param", "speed")
            f["estimate"] = est
            f["lower"] = lo
            f["upper"] = hi
            f["extrapolated"] = curves["r"].extrapolated.astype(int)
            frames.append(f)
        frame = pd.concat(frames, ignore_index=True)
    else:
        tables = _default_tables(result, int(cfg.get("points", 101)))
        frame = _curves_frame(result, tables, draws, level)
    _write_csv(os.path.join(out_dir, "curves.csv"), frame)
    _write_manifest(out_dir, "predict", cfg, seed, ["curves.csv"])
    print(f"predict: wrote {len(frame)} curve rows")
    return 0


def cmd_coverage(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"scenario", "replicates", "level", "draws", "grid",
                      "num_basis", "out", "seed"})
    sc = cfg.get("scenario")
    if not isinstance(sc, dict):
        raise UserError("coverage config needs a 'scenario' object")
    sc = dict(sc)
    if "seed" in cfg:
        sc["seed"] = int(cfg["seed"])
    n_replicates = int(cfg.get("replicates", 200))
    out = coverage_experiment(
        sc,
        n_replicates=n_replicates,
        level=float(cfg.get("level", 0.95)),
        n_draws=int(cfg.get("draws", 1000)),
        n_grid=int(cfg.get("grid", 101)),
        num_basis=int(cfg.get("num_basis", 10)),
    )
    frame = pd.concat(
        [pd.DataFrame({"param": p, "x": out.grid, "coverage": out.per_point[p]})
         for p in sorted(out.per_point)],
        ignore_index=True,
    )
    _write_csv(os.path.join(out_dir, "coverage.csv"), frame)
    _write_json(os.path.join(out_dir, "summary.json"), {
        "level": out.level,
        "replicates": n_replicates,
        "n_ok": out.n_ok,
        "n_failed": out.n_failed,
        "coverage": {p: float(v) for p, v in out.coverage.items()},
    })
    _write_manifest(out_dir, "coverage", cfg, int(sc.get("seed", 0)),
                    ["coverage.csv", "summary.json"])
    print(
        "coverage: "
        + ", ".join(f"{p}={out.coverage[p]:.3f}" for p in sorted(out.coverage))
        + f" over {out.n_ok} replicates"
    )
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "residuals": cmd_residuals,
    "predict": cmd_predict,
    "coverage": cmd_coverage,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="smoothsde",
        description="Varying-coefficient SDE models: simulate, fit, diagnose.",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="<command>")
    for name, help_text in [
        ("fit", "fit a model to a CSV dataset"),
        ("simulate", "simulate a benchmark scenario dataset"),
        ("residuals", "one-step residuals, QQ pairs, and ACF of a saved fit"),
        ("predict", "parameter curves with bands from a saved fit"),
        ("coverage", "interval-coverage experiment over simulated replicates"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="path to a JSON config file")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int,
                       help="RNG seed (overrides config 'seed')")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise UserError("--seed must be a nonnegative integer")
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = args.out
        out_dir = cfg.get("out")
        if not out_dir:
            raise UserError(
                "no output directory: set 'out' in the config or pass --out"
            )
        os.makedirs(out_dir, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_dir)
    except UserError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
