"""Dataset container and CSV ingestion with family-aware validation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import UserError
from .families import SdeFamily, get_family

__all__ = ["DataError", "Dataset", "ingest_csv"]


class DataError(UserError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    """Irregular time series of (series-ID, time, response, covariate) rows.

    Rows are sorted by (ID, time) on construction, so downstream likelihoods
    are invariant to the input row order. ``response`` names the observed
    process columns: ("z",) for scalar families, ("x", "y") for planar
    position data.
    """

    df: pd.DataFrame
    response: tuple[str, ...] = ("z",)
    _bounds: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        df = self.df
        if "time" not in df.columns:
            raise DataError("data must have a 'time' column")
        for col in self.response:
            if col not in df.columns:
                raise DataError(f"response column {col!r} not in data")
        if "ID" not in df.columns:
            df = df.assign(ID=1)
        time = pd.to_numeric(df["time"], errors="coerce")
        if time.isna().any():
            rows = list(df.index[time.isna()][:5])
            raise DataError(f"non-numeric time values at rows {rows}")
        df = df.assign(time=time.astype(float))
        order = np.lexsort((df["time"].to_numpy(), df["ID"].astype(str).to_numpy()))
        orig_rows = df.index.to_numpy()[order]
        df = df.iloc[order].reset_index(drop=True)
        object.__setattr__(self, "df", df)
        ids = df["ID"].to_numpy()
        starts = [0] + [i for i in range(1, len(df)) if ids[i] != ids[i - 1]]
        stops = starts[1:] + [len(df)]
        bounds = tuple((ids[a], a, b) for a, b in zip(starts, stops))
        object.__setattr__(self, "_bounds", bounds)
        for _, a, b in bounds:
            t = df["time"].to_numpy()[a:b]
            dup = np.nonzero(np.diff(t) <= 0)[0]
            if dup.size:
                k = orig_rows[a + int(dup[0]) + 1]
                raise DataError(
                    f"duplicate timestamp within series {ids[a]!r} at input row "
                    f"{k} (time {t[dup[0] + 1]!r})"
                )

    @property
    def n(self) -> int:
        return len(self.df)

    @property
    def series_bounds(self):
        """Tuples (ID value, start row, stop row), rows sorted by time."""
        return self._bounds

    def column(self, name: str) -> np.ndarray:
        if name not in self.df.columns:
            raise DataError(f"unknown column {name!r}")
        return self.df[name].to_numpy()

    def columns(self) -> dict:
        return {c: self.df[c].to_numpy() for c in self.df.columns}

    def transitions(self):
        """(from_idx, to_idx, dt) for consecutive rows within each series."""
        fr, to = [], []
        for _, a, b in self._bounds:
            fr.append(np.arange(a, b - 1))
            to.append(np.arange(a + 1, b))
        fr = np.concatenate(fr) if fr else np.zeros(0, dtype=int)
        to = np.concatenate(to) if to else np.zeros(0, dtype=int)
        t = self.df["time"].to_numpy()
        return fr, to, t[to] - t[fr]


def _response_for(family: SdeFamily, columns) -> tuple[str, ...]:
    if family.latent and "x" in columns and "y" in columns:
        return ("x", "y")
    if "z" in columns:
        return ("z",)
    if family.latent and "x" in columns:
        return ("x",)
    raise DataError(
        "no response column found (expected 'z', or 'x'/'y' for latent families)"
    )


def ingest_csv(path, family="bm", covariates=None) -> Dataset:
    """Read and validate a CSV file into a Dataset.

    Missing response cells are allowed only for latent (state-space) families,
    where they become missing observations. Missing cells in time, ID, or any
    referenced covariate column are always rejected, with row numbers (1-based
    data rows, as in the file after its header).
    """
    fam = get_family(family) if isinstance(family, str) else family
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    if len(df) == 0:
        raise DataError(f"{path}: no data rows")
    response = _response_for(fam, df.columns)
    checked = ["time"] + (["ID"] if "ID" in df.columns else [])
    for col in covariates or []:
        if col not in df.columns:
            raise DataError(f"{path}: missing covariate column {col!r}")
        checked.append(col)
    for col in checked:
        bad = df.index[pd.isna(df[col])]
        if len(bad):
            rows = [int(i) + 1 for i in bad[:8]]
            raise DataError(f"{path}: missing values in column {col!r} at rows {rows}")
    for col in response:
        bad = df.index[pd.isna(df[col])]
        if len(bad) and not fam.latent:
            rows = [int(i) + 1 for i in bad[:8]]
            raise DataError(
                f"{path}: missing response values at rows {rows}; only "
                "latent-state families accept missing observations"
            )
    return Dataset(df=df, response=response)
