"""Design matrices and roughness penalties for varying SDE parameters.

Each SDE parameter gets a linear predictor built from an intercept, optional
linear covariate terms, penalized B-spline smooths, and random intercepts.
Smooth blocks carry a second-derivative roughness penalty assembled by exact
Gauss-Legendre quadrature; random intercepts carry an identity penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import UserError

__all__ = [
    "FormulaTerm",
    "DesignSet",
    "build_spline_block",
    "build_design_set",
    "design_rows",
    "linear_predictor",
    "apply_link",
]

LINKS = ("identity", "log")

# Quadrature nodes per knot interval. The integrand psi_j'' * psi_k'' is
# piecewise polynomial of degree <= 2*(degree-2) = 2, so 3 points (exact to
# degree 5) leave only rounding error.
_GL_POINTS = 3


class DesignError(UserError):
    """Invalid formula or covariate input."""


@dataclass(frozen=True)
class FormulaTerm:
    """One term of a parameter formula.

    kind is one of "intercept", "linear", "smooth", "random_intercept".
    Smooth terms use `covariate` and `num_basis`; random intercepts use
    `factor`.
    """

    kind: str
    covariate: str | None = None
    num_basis: int = 10
    shrinkage: bool = True
    factor: str | None = None

    def __post_init__(self):
        if self.kind not in ("intercept", "linear", "smooth", "random_intercept"):
            raise DesignError(f"unknown term kind {self.kind!r}")
        if self.kind in ("linear", "smooth") and not self.covariate:
            raise DesignError(f"{self.kind} term needs a covariate name")
        if self.kind == "smooth" and self.num_basis < 3:
            raise DesignError("smooth term needs num_basis >= 3")
        if self.kind == "random_intercept" and not self.factor:
            raise DesignError("random_intercept term needs a factor name")

    @staticmethod
    def from_dict(d: dict) -> "FormulaTerm":
        kind = d.get("kind")
        if kind == "smooth":
            return FormulaTerm(
                kind="smooth",
                covariate=d.get("covariate"),
                num_basis=int(d.get("k", 10)),
                shrinkage=bool(d.get("shrinkage", True)),
            )
        if kind == "linear":
            return FormulaTerm(kind="linear", covariate=d.get("covariate"))
        if kind == "random_intercept":
            return FormulaTerm(kind="random_intercept", factor=d.get("factor"))
        if kind == "intercept":
            return FormulaTerm(kind="intercept")
        raise DesignError(f"unknown term kind {kind!r}")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "smooth":
            d.update(covariate=self.covariate, k=int(self.num_basis),
                     shrinkage=bool(self.shrinkage))
        elif self.kind == "linear":
            d["covariate"] = self.covariate
        elif self.kind == "random_intercept":
            d["factor"] = self.factor
        return d


@dataclass
class SmoothMeta:
    """Construction state of one smooth block, kept for prediction."""

    covariate: str
    knots: np.ndarray          # full knot vector, boundary knots repeated
    degree: int
    num_basis: int             # columns before the constraint is absorbed
    col_means: np.ndarray      # centering constants, length num_basis
    lo: float
    hi: float
    shrinkage: bool

    def to_dict(self) -> dict:
        return {
            "covariate": self.covariate,
            "knots": self.knots.tolist(),
            "degree": int(self.degree),
            "num_basis": int(self.num_basis),
            "col_means": self.col_means.tolist(),
            "lo": float(self.lo),
            "hi": float(self.hi),
            "shrinkage": bool(self.shrinkage),
        }

    @staticmethod
    def from_dict(d: dict) -> "SmoothMeta":
        return SmoothMeta(
            covariate=d["covariate"],
            knots=np.asarray(d["knots"], dtype=float),
            degree=int(d["degree"]),
            num_basis=int(d["num_basis"]),
            col_means=np.asarray(d["col_means"], dtype=float),
            lo=float(d["lo"]),
            hi=float(d["hi"]),
            shrinkage=bool(d["shrinkage"]),
        )


@dataclass
class FactorMeta:
    factor: str
    levels: list

    def to_dict(self) -> dict:
        return {"factor": self.factor, "levels": list(self.levels)}

    @staticmethod
    def from_dict(d: dict) -> "FactorMeta":
        return FactorMeta(factor=d["factor"], levels=list(d["levels"]))


@dataclass
class TermBlock:
    """Column range of one term inside X_fe or X_re."""

    param: str
    label: str
    kind: str
    start: int
    stop: int
    meta: SmoothMeta | FactorMeta | None = None

    @property
    def cols(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass
class DesignSet:
    """Stacked design matrices for all SDE parameters of a model.

    X_fe holds unpenalized columns (intercepts, linear terms), X_re holds
    penalized columns (centered spline blocks, random-intercept indicators).
    `penalties[j]` is the penalty matrix of re_blocks[j]; the block's
    `start:stop` range maps it onto columns of X_re.
    """

    param_names: list[str]
    X_fe: np.ndarray
    X_re: np.ndarray
    fe_blocks: list[TermBlock]
    re_blocks: list[TermBlock]
    penalties: list[np.ndarray]
    n_rows: int

    def to_dict(self) -> dict:
        def block_dict(b: TermBlock) -> dict:
            d = {
                "param": b.param,
                "label": b.label,
                "kind": b.kind,
                "start": b.start,
                "stop": b.stop,
            }
            if b.meta is not None:
                d["meta"] = b.meta.to_dict()
            return d

        return {
            "param_names": list(self.param_names),
            "n_fe": int(self.n_fe),
            "n_re": int(self.n_re),
            "fe_blocks": [block_dict(b) for b in self.fe_blocks],
            "re_blocks": [block_dict(b) for b in self.re_blocks],
            "penalties": [S.tolist() for S in self.penalties],
        }

    @staticmethod
    def from_dict(d: dict) -> "DesignSet":
        """Rebuild a DesignSet skeleton (no rows) from its serialized form.

        The skeleton carries knots, centering constants, and penalties, which
        is all `design_rows` needs; X_fe and X_re are empty.
        """

        def block(bd: dict) -> TermBlock:
            meta = None
            if "meta" in bd:
                meta = (
                    SmoothMeta.from_dict(bd["meta"])
                    if bd["kind"] == "smooth"
                    else FactorMeta.from_dict(bd["meta"])
                )
            return TermBlock(
                param=bd["param"],
                label=bd["label"],
                kind=bd["kind"],
                start=int(bd["start"]),
                stop=int(bd["stop"]),
                meta=meta,
            )

        return DesignSet(
            param_names=list(d["param_names"]),
            X_fe=np.empty((0, int(d["n_fe"]))),
            X_re=np.empty((0, int(d["n_re"]))),
            fe_blocks=[block(b) for b in d["fe_blocks"]],
            re_blocks=[block(b) for b in d["re_blocks"]],
            penalties=[np.asarray(S, dtype=float) for S in d["penalties"]],
            n_rows=0,
        )

    def fe_cols(self, param: str) -> np.ndarray:
        idx = [np.arange(b.start, b.stop) for b in self.fe_blocks if b.param == param]
        return np.concatenate(idx) if idx else np.empty(0, dtype=int)

    def re_cols(self, param: str) -> np.ndarray:
        idx = [np.arange(b.start, b.stop) for b in self.re_blocks if b.param == param]
        return np.concatenate(idx) if idx else np.empty(0, dtype=int)

    @property
    def fe_labels(self) -> list[str]:
        return [b.label for b in self.fe_blocks]

    @property
    def n_fe(self) -> int:
        return self.X_fe.shape[1]

    @property
    def n_re(self) -> int:
        return self.X_re.shape[1]


def _interior_knots(x: np.ndarray, n_interior: int) -> np.ndarray:
    if n_interior <= 0:
        return np.empty(0)
    qs = np.arange(1, n_interior + 1) / (n_interior + 1)
    kn = np.quantile(x, qs)
    lo, hi = float(np.min(x)), float(np.max(x))
    # Quantile knots collapse under heavy ties; fall back to uniform spacing.
    if np.any(np.diff(kn) <= 0) or kn[0] <= lo or kn[-1] >= hi:
        kn = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return kn


def _knot_vector(x: np.ndarray, num_basis: int) -> tuple[np.ndarray, int]:
    lo, hi = float(np.min(x)), float(np.max(x))
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise DesignError("non-finite covariate values")
    if hi <= lo:
        raise DesignError("degenerate covariate: all values identical")
    # Cubic unless num_basis == 3, which only a quadratic basis can supply.
    degree = 3 if num_basis >= 4 else 2
    interior = _interior_knots(x, num_basis - degree - 1)
    knots = np.concatenate(
        [np.full(degree + 1, lo), interior, np.full(degree + 1, hi)]
    )
    return knots, degree


def _eval_basis(
    x: np.ndarray, knots: np.ndarray, degree: int, num_basis: int, deriv: int = 0
) -> np.ndarray:
    """Evaluate all basis functions at x, linearly extended outside the knots."""
    x = np.asarray(x, dtype=float)
    lo, hi = knots[degree], knots[-degree - 1]
    spl = BSpline(knots, np.eye(num_basis), degree, extrapolate=False)
    xc = np.clip(x, lo, hi)
    out = spl(xc) if deriv == 0 else spl.derivative(deriv)(xc)
    below = x < lo
    above = x > hi
    if deriv == 0 and (below.any() or above.any()):
        d1 = spl.derivative(1)
        if below.any():
            out[below] = spl(np.array([lo]))[0] + np.outer(x[below] - lo, d1(np.array([lo]))[0])
        if above.any():
            out[above] = spl(np.array([hi]))[0] + np.outer(x[above] - hi, d1(np.array([hi]))[0])
    elif deriv >= 1 and (below.any() or above.any()):
        # Derivatives of the linear extension: first derivative is constant,
        # higher derivatives vanish.
        if deriv == 1:
            d1 = spl.derivative(1)
            if below.any():
                out[below] = d1(np.array([lo]))[0]
            if above.any():
                out[above] = d1(np.array([hi]))[0]
        else:
            out[below | above] = 0.0
    return out


def _roughness_penalty(knots: np.ndarray, degree: int, num_basis: int) -> np.ndarray:
    """S[j, k] = integral of psi_j'' psi_k'' over the knot span, exact."""
    lo, hi = knots[degree], knots[-degree - 1]
    breaks = np.unique(knots[(knots >= lo) & (knots <= hi)])
    nodes, weights = np.polynomial.legendre.leggauss(_GL_POINTS)
    S = np.zeros((num_basis, num_basis))
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        xs = a + half * (nodes + 1.0)
        D2 = _eval_basis(xs, knots, degree, num_basis, deriv=2)
        S += half * (D2 * weights[:, None]).T @ D2
    return 0.5 * (S + S.T)


def _shrink(S: np.ndarray) -> np.ndarray:
    """Add a small ridge on the penalty null space so S is strictly PD."""
    vals, vecs = np.linalg.eigh(S)
    tol = max(vals[-1], 1.0) * 1e-10
    null = vecs[:, vals < tol]
    if null.shape[1] == 0:
        return S
    eps = 0.1 * float(np.mean(np.diag(S)))
    return S + eps * (null @ null.T)


def build_spline_block(
    x: np.ndarray, num_basis: int, shrinkage: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Build a centered B-spline basis and its roughness penalty.

    Parameters
    ----------
    x : array, shape (n,)
        Covariate values; knots are placed at quantiles of these.
    num_basis : int
        Number of basis functions, at least 3. Cubic splines are used except
        for num_basis == 3 where the basis is quadratic.
    shrinkage : bool
        If True, the null space of the roughness penalty receives a small
        positive ridge (0.1 times the mean penalty diagonal) making the
        penalty strictly positive definite.

    Returns
    -------
    B : array, shape (n, num_basis)
        Basis evaluated at x with each column centered to mean zero.
    S : array, shape (num_basis, num_basis)
        Symmetric PSD roughness penalty; beta' S beta equals the integrated
        squared second derivative of sum_k beta_k psi_k (centering shifts by
        constants only, so the penalty is unchanged by it).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise DesignError("covariate must be a 1-d array with at least 2 values")
    if num_basis < 3:
        raise DesignError("num_basis must be >= 3")
    knots, degree = _knot_vector(x, num_basis)
    B = _eval_basis(x, knots, degree, num_basis)
    B = B - B.mean(axis=0)
    S = _roughness_penalty(knots, degree, num_basis)
    if shrinkage:
        S = _shrink(S)
    return B, S


def _smooth_block(x: np.ndarray, term: FormulaTerm) -> tuple[np.ndarray, np.ndarray, SmoothMeta]:
    """Constrained smooth block: centered basis with one redundant column dropped.

    Centered B-spline columns sum to the zero vector (partition of unity), so
    exactly one column is redundant against the parameter's intercept. The
    last column is dropped; dropping a coefficient leaves second derivatives
    of the remaining expansion untouched, so the penalty is the matching
    principal submatrix.
    """
    knots, degree = _knot_vector(x, term.num_basis)
    Braw = _eval_basis(x, knots, degree, term.num_basis)
    col_means = Braw.mean(axis=0)
    B = (Braw - col_means)[:, :-1]
    S = _roughness_penalty(knots, degree, term.num_basis)[:-1, :-1]
    if term.shrinkage:
        S = _shrink(S)
    meta = SmoothMeta(
        covariate=term.covariate,
        knots=knots,
        degree=degree,
        num_basis=term.num_basis,
        col_means=col_means,
        lo=float(knots[degree]),
        hi=float(knots[-degree - 1]),
        shrinkage=term.shrinkage,
    )
    return B, S, meta


def _smooth_rows(meta: SmoothMeta, x: np.ndarray) -> np.ndarray:
    B = _eval_basis(x, meta.knots, meta.degree, meta.num_basis)
    return (B - meta.col_means)[:, :-1]


def _factor_block(values, term: FormulaTerm) -> tuple[np.ndarray, np.ndarray, FactorMeta]:
    levels = sorted(set(values.tolist()))
    Z = np.zeros((len(values), len(levels)))
    index = {lev: j for j, lev in enumerate(levels)}
    for i, v in enumerate(values.tolist()):
        Z[i, index[v]] = 1.0
    return Z, np.eye(len(levels)), FactorMeta(factor=term.factor, levels=levels)


def _factor_rows(meta: FactorMeta, values) -> np.ndarray:
    index = {lev: j for j, lev in enumerate(meta.levels)}
    Z = np.zeros((len(values), len(meta.levels)))
    for i, v in enumerate(list(values)):
        if v not in index:
            raise DesignError(f"unknown level {v!r} for factor {meta.factor!r}")
        Z[i, index[v]] = 1.0
    return Z


def _column(data, name: str) -> np.ndarray:
    try:
        col = data[name]
    except (KeyError, IndexError):
        raise DesignError(f"covariate {name!r} not found in data") from None
    arr = np.asarray(col)
    return arr


def _row_count(formulas: dict[str, list[FormulaTerm]], data) -> int:
    names = []
    for terms in formulas.values():
        for t in terms:
            if t.covariate:
                names.append(t.covariate)
            if t.factor:
                names.append(t.factor)
    if names:
        lens = {name: len(_column(data, name)) for name in names}
        if len(set(lens.values())) > 1:
            raise DesignError(f"covariate columns differ in length: {lens}")
        return next(iter(lens.values()))
    # Intercept-only model: take the length of any column in the data.
    if hasattr(data, "keys"):
        for key in data.keys():
            return len(_column(data, key))
    raise DesignError("cannot infer row count from intercept-only formulas")


def build_design_set(formulas: dict[str, list[FormulaTerm]], data) -> DesignSet:
    """Assemble the full design for all SDE parameters.

    Parameters
    ----------
    formulas : dict
        Maps parameter name to its term list. An intercept is always
        included for every parameter, listed first, whether or not the term
        list names one.
    data : mapping of column name to array (a pandas DataFrame works)

    Returns
    -------
    DesignSet with X_fe (intercepts and linear terms), X_re (penalized
    blocks), per-block penalties, and column bookkeeping.
    """
    param_names = list(formulas)
    if not param_names:
        raise DesignError("no parameter formulas given")
    n_rows = _row_count(formulas, data)
    fe_cols: list[np.ndarray] = []
    re_cols: list[np.ndarray] = []
    fe_blocks: list[TermBlock] = []
    re_blocks: list[TermBlock] = []
    penalties: list[np.ndarray] = []
    for param in param_names:
        terms = formulas[param]
        seen_smooth = set()
        for term in terms:
            if term.kind == "smooth":
                if term.covariate in seen_smooth:
                    raise DesignError(
                        f"duplicate smooth of {term.covariate!r} for parameter {param!r}"
                    )
                seen_smooth.add(term.covariate)
        # Intercept first (always present, exactly once), then linear terms,
        # then penalized blocks.
        ordered = [FormulaTerm(kind="intercept")]
        ordered += [t for t in terms if t.kind == "linear"]
        ordered += [t for t in terms if t.kind in ("smooth", "random_intercept")]
        for term in ordered:
            if term.kind == "intercept":
                start = sum(c.shape[1] for c in fe_cols)
                fe_cols.append(np.ones((n_rows, 1)))
                fe_blocks.append(
                    TermBlock(param, f"{param}.intercept", "intercept", start, start + 1)
                )
            elif term.kind == "linear":
                x = _column(data, term.covariate).astype(float)
                start = sum(c.shape[1] for c in fe_cols)
                fe_cols.append(x[:, None])
                fe_blocks.append(
                    TermBlock(param, f"{param}.{term.covariate}", "linear", start, start + 1)
                )
            elif term.kind == "smooth":
                x = _column(data, term.covariate).astype(float)
                if np.any(~np.isfinite(x)):
                    raise DesignError(f"non-finite values in covariate {term.covariate!r}")
                B, S, meta = _smooth_block(x, term)
                start = sum(c.shape[1] for c in re_cols)
                re_cols.append(B)
                re_blocks.append(
                    TermBlock(
                        param,
                        f"{param}.s({term.covariate})",
                        "smooth",
                        start,
                        start + B.shape[1],
                        meta=meta,
                    )
                )
                penalties.append(S)
            else:
                values = _column(data, term.factor)
                Z, S, meta = _factor_block(values, term)
                start = sum(c.shape[1] for c in re_cols)
                re_cols.append(Z)
                re_blocks.append(
                    TermBlock(
                        param,
                        f"{param}.re({term.factor})",
                        "random_intercept",
                        start,
                        start + Z.shape[1],
                        meta=meta,
                    )
                )
                penalties.append(S)
    X_fe = np.hstack(fe_cols) if fe_cols else np.empty((n_rows, 0))
    X_re = np.hstack(re_cols) if re_cols else np.empty((n_rows, 0))
    return DesignSet(
        param_names=param_names,
        X_fe=X_fe,
        X_re=X_re,
        fe_blocks=fe_blocks,
        re_blocks=re_blocks,
        penalties=penalties,
        n_rows=n_rows,
    )


def design_rows(ds: DesignSet, data, strict_levels: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate the design at new covariate values.

    Returns (X_fe, X_re, extrapolated). Smooth blocks are evaluated with the
    stored knots and centering constants and extended linearly outside the
    training range; `extrapolated` flags, per row, whether any smooth
    covariate fell outside its training range. Random-intercept columns are
    zero when the factor column is absent from `data` (population-level
    prediction).
    """
    n = None
    for b in ds.fe_blocks + ds.re_blocks:
        name = None
        if b.kind in ("linear",):
            name = b.label.split(".", 1)[1]
        elif b.kind == "smooth":
            name = b.meta.covariate
        if name is not None:
            n = len(_column(data, name))
            break
    if n is None:
        # Intercept-only model: accept any mapping exposing a length.
        first = next(iter(data.keys()), None) if hasattr(data, "keys") else None
        n = len(_column(data, first)) if first is not None else 1
    X_fe = np.zeros((n, ds.n_fe))
    X_re = np.zeros((n, ds.n_re))
    extrapolated = np.zeros(n, dtype=bool)
    for b in ds.fe_blocks:
        if b.kind == "intercept":
            X_fe[:, b.start] = 1.0
        else:
            X_fe[:, b.start] = _column(data, b.label.split(".", 1)[1]).astype(float)
    for b in ds.re_blocks:
        if b.kind == "smooth":
            x = _column(data, b.meta.covariate).astype(float)
            extrapolated |= (x < b.meta.lo) | (x > b.meta.hi)
            X_re[:, b.cols] = _smooth_rows(b.meta, x)
        else:
            has = True
            try:
                values = _column(data, b.meta.factor)
            except DesignError:
                has = False
            if has:
                if strict_levels:
                    X_re[:, b.cols] = _factor_rows(b.meta, values)
                else:
                    index = {lev: j for j, lev in enumerate(b.meta.levels)}
                    for i, v in enumerate(list(values)):
                        if v in index:
                            X_re[i, b.start + index[v]] = 1.0
    return X_fe, X_re, extrapolated


def linear_predictor(
    ds: DesignSet, alpha: np.ndarray, beta: np.ndarray, param: str,
    X_fe: np.ndarray | None = None, X_re: np.ndarray | None = None,
) -> np.ndarray:
    """eta_p = X_fe alpha + X_re beta restricted to one parameter's columns."""
    if param not in ds.param_names:
        raise DesignError(f"unknown parameter {param!r}")
    X_fe = ds.X_fe if X_fe is None else X_fe
    X_re = ds.X_re if X_re is None else X_re
    fc = ds.fe_cols(param)
    rc = ds.re_cols(param)
    eta = np.zeros(X_fe.shape[0])
    if fc.size:
        eta += X_fe[:, fc] @ np.asarray(alpha, dtype=float)[fc]
    if rc.size:
        eta += X_re[:, rc] @ np.asarray(beta, dtype=float)[rc]
    return eta


def apply_link(eta: np.ndarray, link: str) -> np.ndarray:
    """Map a linear predictor to the parameter scale (inverse link)."""
    if link == "identity":
        return np.asarray(eta, dtype=float)
    if link == "log":
        # Clamp so downstream densities see finite positive values.
        return np.exp(np.clip(eta, -700.0, 700.0))
    raise DesignError(f"unknown link {link!r}")
