import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from smoothsde.basis import (
    DesignError,
    DesignSet,
    FormulaTerm,
    apply_link,
    build_design_set,
    build_spline_block,
    design_rows,
    linear_predictor,
    _knot_vector,
)


def quad_oracle_roughness(knots, degree, beta, n_grid=20001):
    """Integrate f''(x)^2 on a fine grid, with f'' from second differences.

    Independent route: f is evaluated through scipy's BSpline with the
    coefficient vector directly, f'' comes from central second differences,
    and the integral is a Simpson rule. Nothing here shares code with the
    Gauss-Legendre assembly under test.
    """
    from scipy.integrate import simpson

    lo, hi = knots[degree], knots[-degree - 1]
    f = BSpline(knots, np.asarray(beta, dtype=float), degree, extrapolate=True)
    xs = np.linspace(lo, hi, n_grid)
    h = xs[1] - xs[0]
    vals = f(xs)
    d2 = np.empty_like(xs)
    d2[1:-1] = (vals[2:] - 2.0 * vals[1:-1] + vals[:-2]) / h**2
    d2[0] = (f(lo + 2 * h) - 2 * f(lo + h) + f(lo)) / h**2
    d2[-1] = (f(hi) - 2 * f(hi - h) + f(hi - 2 * h)) / h**2
    return simpson(d2**2, x=xs)


def greville(knots, degree):
    """Coefficients that reproduce f(x) = x exactly."""
    m = len(knots) - degree - 1
    return np.array([knots[i + 1 : i + degree + 1].mean() for i in range(m)])


class TestSplineBlock:
    def test_penalty_matches_quadrature_oracle(self):
        # num_basis=5 cubic block on 100 uniform points: beta' S beta must
        # equal the numerically integrated squared second derivative.
        x = np.linspace(0.0, 1.0, 100)
        B, S = build_spline_block(x, 5)
        knots, degree = _knot_vector(x, 5)
        rng = np.random.default_rng(42)
        for _ in range(5):
            beta = rng.normal(size=5)
            want = quad_oracle_roughness(knots, degree, beta)
            got = beta @ S @ beta
            assert got == pytest.approx(want, rel=1e-4)

    @pytest.mark.parametrize("num_basis", [3, 4, 5, 8, 12])
    def test_penalty_matches_oracle_irregular_x(self, num_basis):
        rng = np.random.default_rng(num_basis)
        x = rng.beta(2.0, 1.3, size=400) * 3.0 - 1.0
        _, S = build_spline_block(x, num_basis)
        knots, degree = _knot_vector(x, num_basis)
        beta = rng.normal(size=num_basis)
        want = quad_oracle_roughness(knots, degree, beta)
        assert beta @ S @ beta == pytest.approx(want, rel=1e-4)

    def test_columns_centered(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2.0, 5.0, 300)
        B, _ = build_spline_block(x, 9)
        assert np.abs(B.mean(axis=0)).max() <= 1e-10

    def test_null_space_unpenalized(self):
        # Constants and linear functions have zero second derivative; both
        # must sit in the penalty null space when shrinkage is off.
        x = np.linspace(0.0, 2.0, 150)
        _, S = build_spline_block(x, 7)
        knots, degree = _knot_vector(x, 7)
        ones = np.ones(7)
        lin = greville(knots, degree)
        scale = np.abs(S).max()
        for beta in (ones, lin, 0.7 * ones - 2.1 * lin):
            assert abs(beta @ S @ beta) <= 1e-10 * scale

    def test_shrinkage_makes_block_strictly_pd(self):
        x = np.linspace(0.0, 1.0, 80)
        for m in (3, 5, 10):
            _, S = build_spline_block(x, m, shrinkage=True)
            assert np.linalg.eigvalsh(S).min() > 0.0

    def test_penalty_symmetric_psd(self):
        x = np.random.default_rng(3).normal(size=120)
        _, S = build_spline_block(x, 11)
        assert np.abs(S - S.T).max() == 0.0
        assert np.linalg.eigvalsh(S).min() >= -1e-9 * np.abs(S).max()

    def test_doubling_basis_does_not_hurt_approximation(self):
        # Projection error onto span(intercept, block columns) for a smooth
        # target must not increase when num_basis doubles.
        x = np.linspace(0.0, 1.0, 500)
        target = np.sin(2.0 * np.pi * x) + 0.3 * np.cos(5.0 * x)

        def proj_err(m):
            B, _ = build_spline_block(x, m)
            X = np.column_stack([np.ones_like(x), B])
            coef, *_ = np.linalg.lstsq(X, target, rcond=None)
            return np.linalg.norm(target - X @ coef)

        for m in (5, 8):
            assert proj_err(2 * m) <= proj_err(m) + 1e-12

    def test_constant_covariate_rejected(self):
        with pytest.raises(DesignError):
            build_spline_block(np.full(50, 1.3), 5)

    def test_too_few_basis_rejected(self):
        with pytest.raises(DesignError):
            build_spline_block(np.linspace(0, 1, 50), 2)

    @settings(max_examples=25, deadline=None)
    @given(
        m=st.integers(min_value=3, max_value=14),
        seed=st.integers(min_value=0, max_value=10_000),
        shrink=st.booleans(),
    )
    def test_block_contract_random_inputs(self, m, seed, shrink):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=1.0 + seed % 5, size=rng.integers(30, 200))
        if np.ptp(x) == 0.0:
            return
        B, S = build_spline_block(x, m, shrinkage=shrink)
        assert B.shape == (x.size, m)
        assert S.shape == (m, m)
        assert np.abs(B.mean(axis=0)).max() <= 1e-10
        beta = rng.normal(size=m)
        assert beta @ S @ beta >= -1e-9 * max(np.abs(S).max(), 1.0)


class TestDesignSet:
    def make_data(self, n=60, seed=0):
        rng = np.random.default_rng(seed)
        return {
            "x1": rng.uniform(0.0, 1.0, n),
            "x2": rng.normal(size=n),
            "ID": np.array([f"id{i % 4}" for i in range(n)]),
        }

    def test_smooth_plus_random_intercept_shapes(self):
        # k=5 smooth loses one column to the sum-to-zero constraint, the
        # 4-level factor contributes 4 indicator columns: X_re is 60 x 8 with
        # two penalty blocks and the second one exactly the identity.
        data = self.make_data()
        formulas = {
            "mu": [
                FormulaTerm("smooth", covariate="x2", num_basis=5),
                FormulaTerm("random_intercept", factor="ID"),
            ]
        }
        ds = build_design_set(formulas, data)
        assert ds.X_fe.shape == (60, 1)
        assert ds.X_re.shape == (60, 8)
        assert len(ds.penalties) == 2
        assert ds.penalties[0].shape == (4, 4)
        assert np.array_equal(ds.penalties[1], np.eye(4))

    def test_linear_only_formula(self):
        data = self.make_data()
        ds = build_design_set({"mu": [FormulaTerm("linear", covariate="x1")]}, data)
        assert ds.X_fe.shape == (60, 2)
        assert np.array_equal(ds.X_fe[:, 0], np.ones(60))
        assert np.array_equal(ds.X_fe[:, 1], data["x1"])
        assert ds.X_re.shape == (60, 0)

    def test_indicator_rows_sum_to_one(self):
        data = self.make_data()
        ds = build_design_set(
            {"mu": [FormulaTerm("random_intercept", factor="ID")]}, data
        )
        assert np.allclose(ds.X_re.sum(axis=1), 1.0)

    def test_smooth_columns_centered_in_design(self):
        data = self.make_data()
        ds = build_design_set(
            {"mu": [FormulaTerm("smooth", covariate="x1", num_basis=8)]}, data
        )
        assert np.abs(ds.X_re.mean(axis=0)).max() <= 1e-10

    def test_term_order_changes_only_column_bookkeeping(self):
        data = self.make_data()
        t_lin = FormulaTerm("linear", covariate="x1")
        t_sm = FormulaTerm("smooth", covariate="x2", num_basis=6)
        t_re = FormulaTerm("random_intercept", factor="ID")
        a = build_design_set({"mu": [t_lin, t_sm, t_re]}, data)
        b = build_design_set({"mu": [t_re, t_sm, t_lin]}, data)
        assert np.array_equal(a.X_fe, b.X_fe)
        blocks_a = {blk.label: blk for blk in a.re_blocks}
        blocks_b = {blk.label: blk for blk in b.re_blocks}
        assert blocks_a.keys() == blocks_b.keys()
        for label in blocks_a:
            ba, bb = blocks_a[label], blocks_b[label]
            assert np.array_equal(a.X_re[:, ba.cols], b.X_re[:, bb.cols])
            Sa = a.penalties[a.re_blocks.index(ba)]
            Sb = b.penalties[b.re_blocks.index(bb)]
            assert np.array_equal(Sa, Sb)

    def test_two_parameter_design_and_linear_predictor(self):
        data = self.make_data()
        formulas = {
            "r": [FormulaTerm("smooth", covariate="x1", num_basis=6)],
            "s": [FormulaTerm("linear", covariate="x2")],
        }
        ds = build_design_set(formulas, data)
        alpha = np.array([0.4, -1.0, 0.25])  # r.intercept, s.intercept, s.x2
        beta = np.random.default_rng(5).normal(size=ds.n_re)
        eta_r = linear_predictor(ds, alpha, beta, "r")
        eta_s = linear_predictor(ds, alpha, beta, "s")
        assert np.allclose(eta_r, 0.4 + ds.X_re[:, ds.re_cols("r")] @ beta[ds.re_cols("r")])
        assert np.allclose(eta_s, -1.0 + 0.25 * data["x2"])

    def test_prediction_rows_match_training_rows(self):
        data = self.make_data()
        formulas = {
            "r": [
                FormulaTerm("smooth", covariate="x1", num_basis=7),
                FormulaTerm("random_intercept", factor="ID"),
            ]
        }
        ds = build_design_set(formulas, data)
        Xf, Xr, extrapolated = design_rows(ds, data)
        assert not extrapolated.any()
        assert np.allclose(Xf, ds.X_fe, atol=1e-12)
        assert np.allclose(Xr, ds.X_re, atol=1e-12)

    def test_prediction_without_factor_gives_population_rows(self):
        data = self.make_data()
        formulas = {
            "r": [
                FormulaTerm("smooth", covariate="x1", num_basis=7),
                FormulaTerm("random_intercept", factor="ID"),
            ]
        }
        ds = build_design_set(formulas, data)
        _, Xr, _ = design_rows(ds, {"x1": data["x1"]})
        re_block = [b for b in ds.re_blocks if b.kind == "random_intercept"][0]
        assert np.array_equal(Xr[:, re_block.cols], np.zeros((60, 4)))

    def test_extrapolation_is_linear_and_flagged(self):
        data = self.make_data()
        ds = build_design_set(
            {"r": [FormulaTerm("smooth", covariate="x1", num_basis=9)]}, data
        )
        lo, hi = data["x1"].min(), data["x1"].max()
        xs = hi + np.array([0.5, 1.0, 1.5, 2.0])
        _, Xr, extrapolated = design_rows(ds, {"x1": xs})
        assert extrapolated.all()
        # Equally spaced points on a linear extension have vanishing second
        # differences, and the section joins the boundary value continuously.
        second_diff = Xr[2:] - 2.0 * Xr[1:-1] + Xr[:-2]
        assert np.abs(second_diff).max() <= 1e-9
        _, Xb, _ = design_rows(ds, {"x1": np.array([hi, hi - 1e-9])})
        assert np.abs(Xb[0] - Xb[1]).max() <= 1e-6

    def test_unknown_level_rejected(self):
        data = self.make_data()
        ds = build_design_set(
            {"r": [FormulaTerm("random_intercept", factor="ID")]}, data
        )
        with pytest.raises(DesignError):
            design_rows(ds, {"ID": np.array(["id0", "new_one"])})

    def test_roundtrip_serialization(self):
        data = self.make_data()
        formulas = {
            "r": [
                FormulaTerm("smooth", covariate="x1", num_basis=6),
                FormulaTerm("random_intercept", factor="ID"),
            ],
            "s": [FormulaTerm("smooth", covariate="x2", num_basis=5)],
        }
        ds = build_design_set(formulas, data)
        ds2 = DesignSet.from_dict(ds.to_dict())
        Xf1, Xr1, _ = design_rows(ds, data)
        Xf2, Xr2, _ = design_rows(ds2, data)
        assert np.allclose(Xf1, Xf2)
        assert np.allclose(Xr1, Xr2)
        for S1, S2 in zip(ds.penalties, ds2.penalties):
            assert np.allclose(S1, S2)


class TestLinks:
    def test_identity(self):
        eta = np.array([-1.0, 0.0, 2.5])
        assert np.array_equal(apply_link(eta, "identity"), eta)

    def test_log(self):
        assert apply_link(np.array([0.0]), "log")[0] == pytest.approx(1.0)
        assert apply_link(np.array([1.5]), "log")[0] == pytest.approx(np.exp(1.5))

    def test_log_output_positive(self):
        eta = np.array([-1e4, -5.0, 0.0, 5.0, 1e4])
        out = apply_link(eta, "log")
        assert (out > 0.0).all() and np.isfinite(out).all()

    def test_unknown_link_rejected(self):
        with pytest.raises(DesignError):
            apply_link(np.zeros(3), "probit")
