"""End-to-end subcommand behavior: artifacts, exit codes, determinism."""

import dataclasses
import json
import os

import numpy as np
import pandas as pd
import pytest

from smoothsde import cli
from smoothsde.errors import NumericalError
from smoothsde.inference import FitResult


def write_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh)
    return str(path)


def bm_fit_config(data_path, out_dir, k=6, seed=0):
    return {
        "data": str(data_path),
        "model": {
            "family": "bm",
            "formulas": {
                "r": [{"kind": "smooth", "covariate": "x1", "k": k}],
                "s": [{"kind": "smooth", "covariate": "x1", "k": k}],
            },
        },
        "curves": {"points": 21, "draws": 100},
        "out": str(out_dir),
        "seed": seed,
    }


@pytest.fixture(scope="module")
def bm_run(tmp_path_factory):
    """Simulate a small BM scenario and fit it once, via the CLI."""
    base = tmp_path_factory.mktemp("bmrun")
    sim_cfg = write_config(base / "sim.json", {
        "scenario": {
            "scenario": "BM_COVARIATE", "n_fine": 4000, "n_keep": 300,
            "seed": 5,
        },
        "out": str(base / "sim"),
    })
    rc_sim = cli.main(["simulate", "--config", sim_cfg])
    data_path = base / "sim" / "data.csv"
    fit_cfg_payload = bm_fit_config(data_path, base / "fit")
    fit_cfg = write_config(base / "fit.json", fit_cfg_payload)
    rc_fit = cli.main(["fit", "--config", fit_cfg])
    return {
        "base": base,
        "rc_sim": rc_sim,
        "rc_fit": rc_fit,
        "data": data_path,
        "fit_dir": base / "fit",
        "fit_cfg_payload": fit_cfg_payload,
    }


class TestSimulateAndFit:
    def test_roundtrip_exit_codes(self, bm_run):
        assert bm_run["rc_sim"] == 0
        assert bm_run["rc_fit"] == 0

    def test_simulate_artifacts(self, bm_run):
        sim_dir = bm_run["base"] / "sim"
        data = pd.read_csv(sim_dir / "data.csv")
        assert len(data) == 300
        assert {"ID", "time", "z", "x1"} <= set(data.columns)
        truth = pd.read_csv(sim_dir / "truth.csv")
        assert set(truth["param"]) == {"r", "s"}
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 5

    def test_fit_artifacts(self, bm_run):
        fit_dir = bm_run["fit_dir"]
        payload = json.loads((fit_dir / "fit.json").read_text())
        result = FitResult.from_dict(payload)
        assert result.converged
        curves = pd.read_csv(fit_dir / "curves.csv")
        assert list(curves.columns) == [
            "param", "covariate", "x", "estimate", "lower", "upper",
            "extrapolated",
        ]
        assert len(curves) == 2 * 21
        assert set(curves["param"]) == {"r", "s"}
        assert np.all(curves["lower"] <= curves["estimate"] + 1e-12)
        assert np.all(curves["estimate"] <= curves["upper"] + 1e-12)
        s_rows = curves[curves["param"] == "s"]
        assert np.all(s_rows["lower"] > 0)

    def test_manifest_has_no_clock(self, bm_run):
        manifest = json.loads(
            (bm_run["fit_dir"] / "manifest.json").read_text()
        )
        assert set(manifest) == {
            "command", "config_sha256", "seed", "package", "versions",
            "outputs",
        }
        assert sorted(manifest["outputs"]) == [
            "curves.csv", "fit.json", "manifest.json",
        ]

    def test_rerun_is_byte_identical(self, bm_run, tmp_path):
        cfg = dict(bm_run["fit_cfg_payload"])
        cfg["out"] = str(tmp_path / "fit2")
        rc = cli.main(["fit", "--config", write_config(tmp_path / "c.json", cfg)])
        assert rc == 0
        for name in ("fit.json", "curves.csv", "manifest.json"):
            first = (bm_run["fit_dir"] / name).read_bytes()
            second = (tmp_path / "fit2" / name).read_bytes()
            assert first == second, name

    def test_seed_changes_bands_not_estimates(self, bm_run, tmp_path):
        cfg = dict(bm_run["fit_cfg_payload"])
        cfg["out"] = str(tmp_path / "fit3")
        path = write_config(tmp_path / "c.json", cfg)
        rc = cli.main(["fit", "--config", path, "--seed", "99"])
        assert rc == 0
        a = pd.read_csv(bm_run["fit_dir"] / "curves.csv")
        b = pd.read_csv(tmp_path / "fit3" / "curves.csv")
        np.testing.assert_allclose(a["estimate"], b["estimate"], atol=1e-12)
        assert not np.allclose(a["lower"], b["lower"])

    def test_no_out_dir(self, bm_run, tmp_path):
        cfg = dict(bm_run["fit_cfg_payload"])
        del cfg["out"]
        rc = cli.main(["fit", "--config", write_config(tmp_path / "c.json", cfg)])
        assert rc == 2


class TestConfigErrors:
    def test_malformed_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"data": \n  oops}')
        rc = cli.main(["fit", "--config", str(bad)])
        assert rc == 2
        err = capsys.readouterr().err
        assert "line 2" in err

    def test_missing_config_file(self, tmp_path):
        rc = cli.main(["fit", "--config", str(tmp_path / "none.json")])
        assert rc == 2

    def test_unknown_top_level_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {
            "datum": "x.csv", "out": str(tmp_path / "o"),
        })
        rc = cli.main(["fit", "--config", cfg])
        assert rc == 2
        assert "datum" in capsys.readouterr().err

    def test_missing_data_file(self, tmp_path):
        cfg = bm_fit_config(tmp_path / "nope.csv", tmp_path / "o")
        rc = cli.main(["fit", "--config", write_config(tmp_path / "c.json", cfg)])
        assert rc == 2

    def test_incomplete_model(self, bm_run, tmp_path, capsys):
        cfg = bm_fit_config(bm_run["data"], tmp_path / "o")
        del cfg["model"]["formulas"]["s"]
        rc = cli.main(["fit", "--config", write_config(tmp_path / "c.json", cfg)])
        assert rc == 2
        assert "missing" in capsys.readouterr().err

    def test_bad_term_kind(self, bm_run, tmp_path):
        cfg = bm_fit_config(bm_run["data"], tmp_path / "o")
        cfg["model"]["formulas"]["r"] = [{"kind": "wiggle", "covariate": "x1"}]
        rc = cli.main(["fit", "--config", write_config(tmp_path / "c.json", cfg)])
        assert rc == 2


class TestFitFailurePaths:
    def test_numerical_failure_writes_diagnostics(self, bm_run, tmp_path,
                                                  monkeypatch):
        def boom(*a, **kw):
            raise NumericalError("synthetic blowup")

        monkeypatch.setattr(cli, "fit", boom)
        cfg = dict(bm_run["fit_cfg_payload"])
        cfg["out"] = str(tmp_path / "o")
        rc = cli.main(["fit", "--config", write_config(tmp_path / "c.json", cfg)])
        assert rc == 1
        diag = json.loads((tmp_path / "o" / "diagnostics.json").read_text())
        assert "synthetic blowup" in diag["error"]
        assert (tmp_path / "o" / "manifest.json").exists()

    def test_nonconverged_fit_exits_one(self, bm_run, tmp_path, monkeypatch):
        real = json.loads((bm_run["fit_dir"] / "fit.json").read_text())
        stale = dataclasses.replace(
            FitResult.from_dict(real), converged=False, message="line search"
        )

        def fake(spec, data, **kw):
            kw.get("trace", []).append({"eval": 1, "marginal_nll": 0.0})
            return stale

        monkeypatch.setattr(cli, "fit", fake)
        cfg = dict(bm_run["fit_cfg_payload"])
        cfg["out"] = str(tmp_path / "o")
        rc = cli.main(["fit", "--config", write_config(tmp_path / "c.json", cfg)])
        assert rc == 1
        out = tmp_path / "o"
        assert (out / "fit.json").exists()
        assert (out / "curves.csv").exists()
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["message"] == "line search"
        assert diag["trace"]


class TestResidualsCommand:
    def test_residual_artifacts(self, bm_run, tmp_path):
        cfg = write_config(tmp_path / "c.json", {
            "fit": str(bm_run["fit_dir"] / "fit.json"),
            "data": str(bm_run["data"]),
            "out": str(tmp_path / "o"),
        })
        rc = cli.main(["residuals", "--config", cfg])
        assert rc == 0
        res = pd.read_csv(tmp_path / "o" / "residuals.csv")
        assert list(res.columns) == ["ID", "time", "residual"]
        assert len(res) == 300 - 1
        qq = pd.read_csv(tmp_path / "o" / "qq.csv")
        assert list(qq.columns) == ["theoretical", "empirical"]
        assert len(qq) == 299
        ac = pd.read_csv(tmp_path / "o" / "acf.csv")
        assert list(ac["lag"]) == list(range(41))
        assert ac["acf"][0] == 1.0

    def test_missing_fit_file(self, bm_run, tmp_path):
        cfg = write_config(tmp_path / "c.json", {
            "fit": str(tmp_path / "none.json"),
            "data": str(bm_run["data"]),
            "out": str(tmp_path / "o"),
        })
        assert cli.main(["residuals", "--config", cfg]) == 2


class TestPredictCommand:
    def test_table_prediction(self, bm_run, tmp_path):
        grid = tmp_path / "grid.csv"
        pd.DataFrame({"x1": np.linspace(0.1, 0.9, 17)}).to_csv(
            grid, index=False
        )
        cfg = write_config(tmp_path / "c.json", {
            "fit": str(bm_run["fit_dir"] / "fit.json"),
            "table": str(grid),
            "draws": 200,
            "out": str(tmp_path / "o"),
        })
        rc = cli.main(["predict", "--config", cfg])
        assert rc == 0
        frame = pd.read_csv(tmp_path / "o" / "curves.csv")
        assert list(frame.columns) == [
            "param", "x1", "estimate", "lower", "upper", "extrapolated",
        ]
        assert len(frame) == 2 * 17
        assert np.all(frame["lower"] <= frame["upper"])
        assert not frame["extrapolated"].any()

    def test_extrapolation_flagged(self, bm_run, tmp_path):
        grid = tmp_path / "grid.csv"
        pd.DataFrame({"x1": [-5.0, 0.5]}).to_csv(grid, index=False)
        cfg = write_config(tmp_path / "c.json", {
            "fit": str(bm_run["fit_dir"] / "fit.json"),
            "table": str(grid),
            "draws": 50,
            "out": str(tmp_path / "o"),
        })
        assert cli.main(["predict", "--config", cfg]) == 0
        frame = pd.read_csv(tmp_path / "o" / "curves.csv")
        by_x = frame.set_index(["param", "x1"])["extrapolated"]
        assert by_x[("r", -5.0)] == 1
        assert by_x[("r", 0.5)] == 0

    def test_unknown_covariate(self, bm_run, tmp_path, capsys):
        grid = tmp_path / "grid.csv"
        pd.DataFrame({"q": [0.1, 0.2]}).to_csv(grid, index=False)
        cfg = write_config(tmp_path / "c.json", {
            "fit": str(bm_run["fit_dir"] / "fit.json"),
            "table": str(grid),
            "out": str(tmp_path / "o"),
        })
        assert cli.main(["predict", "--config", cfg]) == 2
        assert "x1" in capsys.readouterr().err

    def test_default_grid_prediction(self, bm_run, tmp_path):
        cfg = write_config(tmp_path / "c.json", {
            "fit": str(bm_run["fit_dir"] / "fit.json"),
            "points": 11,
            "draws": 100,
            "out": str(tmp_path / "o"),
        })
        assert cli.main(["predict", "--config", cfg]) == 0
        frame = pd.read_csv(tmp_path / "o" / "curves.csv")
        assert len(frame) == 2 * 11
        assert set(frame["covariate"]) == {"x1"}


@pytest.fixture(scope="module")
def ctcrw_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("ctcrwrun")
    sim_cfg = write_config(base / "sim.json", {
        "scenario": {
            "scenario": "CTCRW_COVARIATE", "n_fine": 2000, "n_keep": 150,
            "seed": 9,
        },
        "out": str(base / "sim"),
    })
    assert cli.main(["simulate", "--config", sim_cfg]) == 0
    fit_cfg = write_config(base / "fit.json", {
        "data": str(base / "sim" / "data.csv"),
        "model": {
            "family": "ctcrw",
            "formulas": {"r": [], "s": []},
        },
        "curves": {"draws": 100},
        "out": str(base / "fit"),
    })
    assert cli.main(["fit", "--config", fit_cfg]) == 0
    return base


class TestLatentPipeline:
    def test_intercept_fit_emits_speed_curve(self, ctcrw_run):
        curves = pd.read_csv(ctcrw_run / "fit" / "curves.csv")
        assert set(curves["param"]) == {"r", "s", "speed"}
        assert len(curves) == 3
        row = curves.set_index("param")
        speed = float(row.loc["speed", "estimate"])
        want = np.sqrt(np.pi) * row.loc["s", "estimate"] / (
            2 * np.sqrt(row.loc["r", "estimate"])
        )
        assert speed == pytest.approx(float(want), rel=1e-12)
        assert row.loc["speed", "lower"] <= speed <= row.loc["speed", "upper"]

    def test_residuals_refused_for_latent(self, ctcrw_run, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {
            "fit": str(ctcrw_run / "fit" / "fit.json"),
            "data": str(ctcrw_run / "sim" / "data.csv"),
            "out": str(tmp_path / "o"),
        })
        rc = cli.main(["residuals", "--config", cfg])
        assert rc == 2
        assert "latent" in capsys.readouterr().err


class TestCoverageCommand:
    def test_two_replicate_smoke(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {
            "scenario": {
                "scenario": "BM_COVARIATE", "n_fine": 4000, "n_keep": 200,
                "seed": 3,
            },
            "replicates": 2,
            "draws": 50,
            "grid": 11,
            "num_basis": 6,
            "out": str(tmp_path / "o"),
        })
        rc = cli.main(["coverage", "--config", cfg])
        assert rc == 0
        frame = pd.read_csv(tmp_path / "o" / "coverage.csv")
        assert list(frame.columns) == ["param", "x", "coverage"]
        assert len(frame) == 2 * 11
        assert frame["coverage"].isin([0.0, 0.5, 1.0]).all()
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["n_ok"] + summary["n_failed"] == 2
        assert set(summary["coverage"]) == {"r", "s"}
