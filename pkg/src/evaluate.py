"""Rolling one-step forecasting, scoring rules and residual diagnostics."""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Union
import logging
import time

import numpy as np
import pandas as pd

from src.errors import DataError
from src.panel_data import PanelSeries, SplitPlan
from src.series import ForecastOrigin, ForecastSet

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["model", "year", "mspe", "mslpe", "is", "icr"]
AVERAGE_LABEL = "average"

Forecasts = Union[ForecastSet, Sequence[ForecastSet]]


def rolling_forecast(panel: PanelSeries, model, plan: SplitPlan, seed: int = 0) -> List[ForecastSet]:
    """
    Refit on all years before each target year and forecast that year.

    The model needs fit(history) and forecast(origin, rng). Predictive draws
    for a target year use a generator seeded by (seed, target index).
    """
    plan.validate(panel)
    results: List[ForecastSet] = []
    for k in plan.target_indices():
        origin = ForecastOrigin.from_panel(panel, k)
        start = time.time()
        model.fit(origin.history)
        rng = np.random.default_rng([seed, k])
        fs = model.forecast(origin, rng).with_actual(panel.counts[:, k])
        results.append(fs)
        logger.info(f"{fs.model_tag}: forecast {fs.year} from {k} years of history "
                    f"in {time.time() - start:.1f}s")
    return results


def _select(forecasts: Forecasts, year: Optional[int]) -> ForecastSet:
    if isinstance(forecasts, ForecastSet):
        if year is not None and forecasts.year != year:
            raise DataError(f"forecast set is for {forecasts.year}, not {year}")
        fs = forecasts
    else:
        matches = [f for f in forecasts if year is None or f.year == year]
        if len(matches) != 1:
            raise DataError(f"expected exactly one forecast set for year {year}, found {len(matches)}")
        fs = matches[0]
    if fs.actual is None or np.any(np.isnan(fs.actual)) or np.any(np.isnan(fs.point)):
        raise DataError(f"{fs.key()}: missing forecast or realized count for some school")
    return fs


def _with_interval(forecasts: Forecasts, year: Optional[int]) -> ForecastSet:
    fs = _select(forecasts, year)
    if not fs.has_interval:
        raise DataError(f"{fs.key()}: no prediction intervals")
    return fs


def mspe(forecasts: Forecasts, year: Optional[int] = None) -> float:
    """Mean over schools of (point - actual)^2."""
    fs = _select(forecasts, year)
    return float(np.mean((fs.point - fs.actual) ** 2))


def mslpe(forecasts: Forecasts, year: Optional[int] = None) -> float:
    """Mean over schools of (ln(point + 1) - ln(actual + 1))^2."""
    fs = _select(forecasts, year)
    return float(np.mean((np.log1p(fs.point) - np.log1p(fs.actual)) ** 2))


def interval_score(forecasts: Forecasts, year: Optional[int] = None, alpha: float = 0.05) -> float:
    """Width plus 2/alpha times the miss distance below l or above u, averaged over schools."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    fs = _with_interval(forecasts, year)
    y, l, u = fs.actual, fs.lower, fs.upper
    score = (u - l) + (2.0 / alpha) * (l - y) * (y < l) + (2.0 / alpha) * (y - u) * (y > u)
    return float(np.mean(score))


def icr(forecasts: Forecasts, year: Optional[int] = None, level: Optional[float] = None) -> float:
    """Fraction of schools with l < y < u."""
    fs = _with_interval(forecasts, year)
    if level is not None and not np.isclose(level, fs.level):
        raise ValueError(f"{fs.key()}: intervals are at level {fs.level}, not {level}")
    return float(np.mean((fs.lower < fs.actual) & (fs.actual < fs.upper)))


@dataclass
class ScoreReport:
    """Scores per model and year plus per-model average rows."""
    table: pd.DataFrame

    def to_csv(self, path: str) -> None:
        self.table.to_csv(path, index=False, float_format="%.10g", na_rep="")

    def to_json(self, path: str) -> None:
        self.table.to_json(path, orient="records", indent=2, double_precision=10)

    def pivot(self, metric: str) -> pd.DataFrame:
        """Models as rows and years (then the average) as columns."""
        wide = self.table.pivot(index="model", columns="year", values=metric)
        years = [c for c in wide.columns if c != AVERAGE_LABEL]
        order = [m for m in dict.fromkeys(self.table["model"])]
        return wide.loc[order, sorted(years, key=int) + [AVERAGE_LABEL]]

    @classmethod
    def from_csv(cls, path: str) -> "ScoreReport":
        return cls(pd.read_csv(path, dtype={"year": str}))


def score_forecasts(forecast_sets: Iterable[ForecastSet], level: float = 0.95) -> ScoreReport:
    """One row per model-year plus an average row per model; interval scores blank when a model has no intervals."""
    rows = []
    for fs in forecast_sets:
        has_int = fs.has_interval
        rows.append({
            "model": fs.model_tag,
            "year": str(fs.year),
            "mspe": mspe(fs),
            "mslpe": mslpe(fs),
            "is": interval_score(fs, alpha=1.0 - level) if has_int else np.nan,
            "icr": icr(fs, level=level) if has_int else np.nan,
        })
    table = pd.DataFrame(rows, columns=SCORE_COLUMNS)
    averages = (
        table.groupby("model", sort=False)[["mspe", "mslpe", "is", "icr"]]
        .mean()
        .reset_index()
        .assign(year=AVERAGE_LABEL)
    )
    blocks = []
    for model in dict.fromkeys(table["model"]):
        blocks.append(table[table["model"] == model])
        blocks.append(averages[averages["model"] == model][SCORE_COLUMNS])
    full = pd.concat(blocks, ignore_index=True) if blocks else table
    return ScoreReport(full[SCORE_COLUMNS])


@dataclass
class ResidualSummary:
    """Conditional standardized Pearson residuals for years 2..T."""
    residuals: np.ndarray
    variances: np.ndarray
    excluded: List[tuple] = field(default_factory=list)


def pearson_residuals(panel: PanelSeries, mean: np.ndarray, variance: np.ndarray) -> ResidualSummary:
    """
    (Y - E[Y | history]) / sqrt(Var[Y | history]) for every year after the first.

    Cells with zero conditional variance are excluded (NaN) and listed.
    """
    mean = np.asarray(mean, dtype=float)[:, 1:]
    variance = np.asarray(variance, dtype=float)[:, 1:]
    y = panel.counts[:, 1:].astype(float)
    bad = ~(variance > 0) | ~np.isfinite(variance)
    excluded = [(panel.school_ids[i], int(panel.years[t + 1])) for i, t in np.argwhere(bad)]
    if excluded:
        logger.warning(f"Excluded {len(excluded)} school-years with zero conditional variance, "
                       f"e.g. {excluded[:3]}")
    with np.errstate(divide="ignore", invalid="ignore"):
        resid = np.where(bad, np.nan, (y - mean) / np.sqrt(np.where(bad, 1.0, variance)))
    counts = np.sum(~np.isnan(resid), axis=1)
    variances = np.full(panel.N, np.nan)
    ok = counts >= 2
    variances[ok] = np.nanvar(resid[ok], axis=1, ddof=1)
    return ResidualSummary(resid, variances, excluded)


def residual_acf(residuals: np.ndarray, max_lag: int = 10) -> tuple:
    """Per-school sample autocorrelations (N, max_lag + 1) and the +-1.96/sqrt(n) band."""
    from statsmodels.tsa.stattools import acf

    n_school = residuals.shape[0]
    out = np.full((n_school, max_lag + 1), np.nan)
    band = np.full(n_school, np.nan)
    for i in range(n_school):
        series = residuals[i][~np.isnan(residuals[i])]
        if series.size < 2 or np.allclose(series, series[0]):
            continue
        nlags = min(max_lag, series.size - 1)
        out[i, : nlags + 1] = acf(series, nlags=nlags, fft=False)
        band[i] = 1.96 / np.sqrt(series.size)
    return out, band


def dispersion_summary(variances: Dict[str, np.ndarray]) -> pd.DataFrame:
    """Five-number summary of per-school residual variances for each model."""
    rows = []
    for model, v in variances.items():
        v = np.asarray(v, dtype=float)
        v = v[~np.isnan(v)]
        if v.size == 0:
            continue
        q = np.percentile(v, [0, 25, 50, 75, 100])
        rows.append({"model": model, "min": q[0], "q1": q[1], "median": q[2], "q3": q[3],
                     "max": q[4], "n_schools": int(v.size)})
    return pd.DataFrame(rows, columns=["model", "min", "q1", "median", "q3", "max", "n_schools"])
