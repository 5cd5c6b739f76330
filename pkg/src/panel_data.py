"""Panels of count series: ingestion, validation, covariates, simulation and splits."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from src.config import PanelFormat
from src.errors import DataError

logger = logging.getLogger(__name__)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelSeries:
    """Rectangular panel of counts Y[i, t] with state grouping and covariates.

    counts:      (N, T) non-negative integers
    school_ids:  N opaque identifiers
    state_of:    (N,) state index in 0..n_states-1
    state_labels: n_states labels, indexed by state_of
    years:       (T,) consecutive calendar years
    covariates:  (N, T, r) reals; first coordinate is the intercept
    """
    counts: np.ndarray
    school_ids: Tuple[str, ...]
    state_of: np.ndarray
    state_labels: Tuple[str, ...]
    years: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise DataError(f"counts must be a 2-d array, got shape {counts.shape}")
        n, t = counts.shape
        if n == 0 or t == 0:
            raise DataError("panel must contain at least one school and one year")
        if not np.all(np.isfinite(counts)):
            raise DataError("counts contain missing or non-finite entries")
        if np.any(counts < 0):
            i, j = np.argwhere(counts < 0)[0]
            raise DataError(f"negative count at ({self.school_ids[i]}, {int(self.years[j])})")
        if np.any(counts != np.floor(counts)):
            raise DataError("counts must be integers")

        years = np.asarray(self.years, dtype=np.int64)
        if years.shape != (t,):
            raise DataError(f"years has shape {years.shape}, expected ({t},)")
        if t > 1 and np.any(np.diff(years) != 1):
            raise DataError("years must be strictly increasing consecutive integers")

        if len(self.school_ids) != n:
            raise DataError(f"{len(self.school_ids)} school ids for {n} count rows")
        if len(set(self.school_ids)) != n:
            raise DataError("school ids must be unique")

        state_of = np.asarray(self.state_of, dtype=np.int64)
        if state_of.shape != (n,):
            raise DataError("state_of must map every school to exactly one state")
        n_states = len(self.state_labels)
        if np.any(state_of < 0) or np.any(state_of >= n_states):
            raise DataError("state_of contains indices outside the state label range")
        if len(np.unique(state_of)) != n_states:
            raise DataError("every state label must have at least one school")

        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim != 3 or cov.shape[:2] != (n, t):
            raise DataError(f"covariates must have shape ({n}, {t}, r), got {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise DataError("covariates contain non-finite values")

        object.__setattr__(self, "counts", _frozen(counts.astype(np.int64)))
        object.__setattr__(self, "years", _frozen(years))
        object.__setattr__(self, "state_of", _frozen(state_of))
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "school_ids", tuple(str(s) for s in self.school_ids))
        object.__setattr__(self, "state_labels", tuple(str(s) for s in self.state_labels))

    @property
    def N(self) -> int:
        return self.counts.shape[0]

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    @property
    def r(self) -> int:
        return self.covariates.shape[2]

    @property
    def n_states(self) -> int:
        return len(self.state_labels)

    def truncate(self, n_years: int) -> "PanelSeries":
        """Panel restricted to the first n_years years (covariates are sliced, never recomputed)."""
        if not 1 <= n_years <= self.T:
            raise ValueError(f"n_years must be in [1, {self.T}], got {n_years}")
        return PanelSeries(
            counts=self.counts[:, :n_years],
            school_ids=self.school_ids,
            state_of=self.state_of,
            state_labels=self.state_labels,
            years=self.years[:n_years],
            covariates=self.covariates[:, :n_years, :],
        )

    def with_covariates(self, covariates: np.ndarray) -> "PanelSeries":
        return PanelSeries(self.counts, self.school_ids, self.state_of,
                           self.state_labels, self.years, covariates)

    def subset(self, school_index: Sequence[int]) -> "PanelSeries":
        """Panel restricted to the given schools; state labels are re-indexed."""
        idx = np.asarray(school_index, dtype=np.int64)
        kept_states = sorted(set(self.state_of[idx].tolist()))
        remap = {old: new for new, old in enumerate(kept_states)}
        return PanelSeries(
            counts=self.counts[idx],
            school_ids=tuple(self.school_ids[i] for i in idx),
            state_of=np.array([remap[s] for s in self.state_of[idx]]),
            state_labels=tuple(self.state_labels[s] for s in kept_states),
            years=self.years,
            covariates=self.covariates[idx],
        )


@dataclass(frozen=True)
class SplitPlan:
    """Rolling-origin plan: forecast years train_end_index .. train_end_index+horizon-1 (0-based)."""
    train_end_index: int
    horizon: int

    def validate(self, panel: PanelSeries) -> None:
        if not 1 <= self.train_end_index < panel.T:
            raise DataError(
                f"train_end_index must be in [1, {panel.T - 1}], got {self.train_end_index}"
            )
        if self.horizon < 1 or self.train_end_index + self.horizon > panel.T:
            raise DataError(
                f"horizon {self.horizon} from index {self.train_end_index} runs past the "
                f"last year {int(panel.years[-1])}"
            )

    def target_indices(self) -> List[int]:
        return list(range(self.train_end_index, self.train_end_index + self.horizon))

    @classmethod
    def from_first_target_year(cls, panel: PanelSeries, year: int, horizon: int) -> "SplitPlan":
        matches = np.flatnonzero(panel.years == year)
        if matches.size == 0:
            raise DataError(f"first target year {year} is not in the panel "
                            f"({int(panel.years[0])}-{int(panel.years[-1])})")
        return cls(int(matches[0]), horizon)


def default_covariates(panel: PanelSeries) -> PanelSeries:
    """Intercept plus a linear trend scaled to [0, 1] over the panel's years."""
    if panel.T < 2:
        raise DataError("default covariates need at least two years (trend undefined for T = 1)")
    span = panel.years[-1] - panel.years[0]
    trend = (panel.years - panel.years[0]) / span
    cov = np.empty((panel.N, panel.T, 2))
    cov[:, :, 0] = 1.0
    cov[:, :, 1] = trend[None, :]
    return panel.with_covariates(cov)


def intercept_covariates(panel: PanelSeries) -> PanelSeries:
    return panel.with_covariates(np.ones((panel.N, panel.T, 1)))


def load_panel(path: str, fmt: Optional[PanelFormat] = None,
               covariates: str = "default") -> PanelSeries:
    """Read and validate a long-format panel CSV (one row per school-year).

    covariates:
        "default"   intercept + scaled trend
        "intercept" intercept only
        "columns"   intercept followed by the CSV covariate columns
    """
    fmt = fmt or PanelFormat()
    try:
        df = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError:
        raise
    except Exception as e:
        raise DataError(f"Failed to parse panel CSV {path}: {e}")

    required = [fmt.school_col, fmt.state_col, fmt.year_col, fmt.count_col]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"Panel CSV {path} is missing columns {missing}")
    if df.empty:
        raise DataError(f"Panel CSV {path} has no rows")

    cov_cols = fmt.covariate_cols
    if cov_cols is None:
        cov_cols = [c for c in df.columns if c not in required]
    absent = [c for c in cov_cols if c not in df.columns]
    if absent:
        raise DataError(f"Covariate columns {absent} not found in {path}")

    df = df.rename(columns={fmt.school_col: "school_id", fmt.state_col: "state",
                            fmt.year_col: "year", fmt.count_col: "count"})
    df["school_id"] = df["school_id"].astype(str)
    df["state"] = df["state"].astype(str)

    for col in ["year", "count", *cov_cols]:
        values = pd.to_numeric(df[col], errors="coerce")
        if values.isna().any():
            row = int(values.isna().to_numpy().nonzero()[0][0])
            raise DataError(f"Missing or non-numeric '{col}' in {path} at data row {row + 1}")
        df[col] = values

    if np.any(df["year"] != np.floor(df["year"])) or np.any(df["count"] != np.floor(df["count"])):
        raise DataError("year and count must be integers")
    df["year"] = df["year"].astype(np.int64)
    df["count"] = df["count"].astype(np.int64)

    negative = df[df["count"] < 0]
    if not negative.empty:
        row = negative.iloc[0]
        raise DataError(f"negative count at ({row['school_id']}, {int(row['year'])})")

    dup = df.duplicated(subset=["school_id", "year"], keep=False)
    if dup.any():
        pairs = df.loc[dup, ["school_id", "year"]].drop_duplicates().head(5)
        listed = ", ".join(f"({s}, {y})" for s, y in pairs.itertuples(index=False))
        raise DataError(f"duplicate (school, year) rows: {listed}")

    states_per_school = df.groupby("school_id", sort=False)["state"].nunique()
    multi = states_per_school[states_per_school > 1]
    if not multi.empty:
        raise DataError(f"schools mapped to more than one state: {list(multi.index[:10])}")

    years = np.arange(df["year"].min(), df["year"].max() + 1)
    coverage = df.groupby("school_id", sort=False)["year"].agg(["count", "min", "max"])
    ragged = coverage[(coverage["count"] != len(years))
                      | (coverage["min"] != years[0])
                      | (coverage["max"] != years[-1])]
    if not ragged.empty:
        raise DataError(
            f"ragged year coverage ({years[0]}-{years[-1]} required) for schools: "
            f"{list(ragged.index)}"
        )

    df = df.sort_values(["school_id", "year"], kind="stable")
    school_ids = list(dict.fromkeys(df["school_id"]))
    n, t = len(school_ids), len(years)
    counts = df["count"].to_numpy().reshape(n, t)

    first_rows = df.groupby("school_id", sort=False)["state"].first()
    state_labels = sorted(first_rows.unique())
    state_index: Dict[str, int] = {s: k for k, s in enumerate(state_labels)}
    state_of = np.array([state_index[first_rows[s]] for s in school_ids])

    if covariates == "columns":
        extra = df[cov_cols].to_numpy(dtype=float).reshape(n, t, len(cov_cols))
        cov = np.concatenate([np.ones((n, t, 1)), extra], axis=2)
    else:
        cov = np.ones((n, t, 1))

    panel = PanelSeries(counts, tuple(school_ids), state_of, tuple(state_labels), years, cov)
    if covariates == "default":
        panel = default_covariates(panel)
    elif covariates not in ("intercept", "columns"):
        raise ValueError(f"Unknown covariate mode: {covariates}")

    logger.info(f"Loaded panel {path}: N={panel.N} schools, T={panel.T} years "
                f"({int(years[0])}-{int(years[-1])}), {panel.n_states} states, r={panel.r}")
    return panel


def save_panel(panel: PanelSeries, path: str) -> None:
    """Write the panel as long-format CSV; covariates after the intercept become x1, x2, ..."""
    rows = {
        "school_id": np.repeat(np.array(panel.school_ids, dtype=object), panel.T),
        "state": np.repeat(np.array(panel.state_labels, dtype=object)[panel.state_of], panel.T),
        "year": np.tile(panel.years, panel.N),
        "count": panel.counts.reshape(-1),
    }
    for k in range(1, panel.r):
        rows[f"x{k}"] = panel.covariates[:, :, k].reshape(-1)
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")


def overdispersion_summary(panel: PanelSeries) -> Tuple[float, float]:
    """(mean of per-school means, mean of per-school variances with denominator T-1)."""
    if panel.T < 2:
        raise DataError("overdispersion summary needs T >= 2")
    counts = panel.counts.astype(float)
    return float(counts.mean(axis=1).mean()), float(counts.var(axis=1, ddof=1).mean())


def simulate_panel(dgp: str, n_states: int, schools_per_state: int, T: int, seed: int,
                   **params) -> Tuple[PanelSeries, dict]:
    """Simulate a panel from a named generator; returns (panel, ground truth)."""
    from src.generators import create_generator

    generator = create_generator(dgp, n_states=n_states, schools_per_state=schools_per_state,
                                 T=T, seed=seed, **params)
    return generator.generate()
