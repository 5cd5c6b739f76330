"""Tests for scoring rules, rolling forecasts and residual diagnostics."""
import numpy as np
import pandas as pd
import pytest

from conftest import make_panel
from src.config import ModelConfig
from src.errors import DataError
from src.evaluate import (
    AVERAGE_LABEL,
    SCORE_COLUMNS,
    ScoreReport,
    dispersion_summary,
    icr,
    interval_score,
    mslpe,
    mspe,
    pearson_residuals,
    residual_acf,
    rolling_forecast,
    score_forecasts,
)
from src.models import ModelContext, create_model
from src.panel_data import SplitPlan
from src.series import ForecastSet

E1 = np.e - 1.0


def _fs(point, actual, lower=None, upper=None, model="m", year=2020, level=0.95):
    ids = tuple(f"s{i}" for i in range(len(point)))
    return ForecastSet(model, year, ids, point, lower, upper, actual=actual, level=level)


def test_mspe_and_mslpe_hand_values():
    assert mspe(_fs([3.0, 2.0], [2.0, 4.0])) == pytest.approx(2.5)
    assert mslpe(_fs([E1, 0.0], [0.0, E1])) == pytest.approx(1.0)
    assert mspe(_fs([1.0], [1.0])) == 0.0


def test_interval_score_hand_values():
    assert interval_score(_fs([1.0], [1.0], [0.0], [2.0])) == pytest.approx(2.0)
    assert interval_score(_fs([1.0], [3.0], [0.0], [2.0])) == pytest.approx(42.0)
    assert interval_score(_fs([4.0], [1.0], [3.0], [5.0]), alpha=0.1) == pytest.approx(2.0 + 20.0 * 2.0)
    # the upper bound itself is not a miss
    assert interval_score(_fs([1.0], [2.0], [0.0], [2.0])) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        interval_score(_fs([1.0], [1.0], [0.0], [2.0]), alpha=0.0)


def test_icr_uses_open_interval():
    fs = _fs([1.0, 1.0, 1.0, 1.0], [1.0, 0.0, 2.0, 5.0], [0.0] * 4, [2.0] * 4)
    assert icr(fs) == pytest.approx(0.25)
    assert icr(fs, level=0.95) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        icr(fs, level=0.9)


def test_scores_need_actuals_and_intervals():
    with pytest.raises(DataError):
        mspe(ForecastSet("m", 2020, ("a",), [1.0]))
    with pytest.raises(DataError):
        interval_score(_fs([1.0], [1.0]))
    with pytest.raises(DataError):
        mspe(_fs([np.nan], [1.0]))


def test_year_selection_from_a_list():
    sets = [_fs([1.0], [2.0], year=2019), _fs([1.0], [4.0], year=2020)]
    assert mspe(sets, 2020) == pytest.approx(9.0)
    with pytest.raises(DataError):
        mspe(sets)
    with pytest.raises(DataError):
        mspe(sets[0], 2020)


def test_score_report_layout(tmp_path):
    sets = [
        _fs([3.0, 2.0], [2.0, 4.0], model="intercept", year=2019),
        _fs([2.0, 4.0], [2.0, 4.0], model="intercept", year=2020),
        _fs([2.0, 4.0], [2.0, 4.0], [0.0, 3.0], [3.0, 5.0], model="ingarch11", year=2019),
        _fs([2.0, 4.0], [2.0, 9.0], [0.0, 3.0], [3.0, 5.0], model="ingarch11", year=2020),
    ]
    report = score_forecasts(sets, level=0.95)
    table = report.table
    assert list(table.columns) == SCORE_COLUMNS
    assert table["model"].tolist() == ["intercept"] * 3 + ["ingarch11"] * 3
    assert table["year"].tolist() == ["2019", "2020", AVERAGE_LABEL] * 2
    assert table["is"].iloc[:3].isna().all()
    assert table.loc[2, "mspe"] == pytest.approx(1.25)
    assert table.loc[5, "icr"] == pytest.approx(0.75)

    wide = report.pivot("mspe")
    assert list(wide.index) == ["intercept", "ingarch11"]
    assert list(wide.columns) == ["2019", "2020", AVERAGE_LABEL]

    path = str(tmp_path / "scores.csv")
    report.to_csv(path)
    loaded = ScoreReport.from_csv(path)
    pd.testing.assert_frame_equal(loaded.pivot("mspe"), wide, check_exact=False, rtol=1e-9)


def test_rolling_forecast_with_intercept(small_panel):
    model = create_model(ModelConfig(name="intercept"), ModelContext())
    sets = rolling_forecast(small_panel, model, SplitPlan(12, 3), seed=1)
    assert [fs.year for fs in sets] == [int(y) for y in small_panel.years[12:15]]
    for k, fs in zip(range(12, 15), sets):
        np.testing.assert_allclose(fs.point, small_panel.counts[:, :k].mean(axis=1))
        np.testing.assert_array_equal(fs.actual, small_panel.counts[:, k])


class _HistorySpy:
    """Records the history it is fit on and forecasts the last observed count."""

    def __init__(self):
        self.seen = []

    def fit(self, history):
        self.seen.append(history.counts.copy())
        self.history = history
        return self

    def forecast(self, origin, rng):
        return ForecastSet("spy", origin.year, origin.history.school_ids,
                           origin.history.counts[:, -1].astype(float))


def test_rolling_forecast_never_sees_the_target(small_panel):
    spy = _HistorySpy()
    rolling_forecast(small_panel, spy, SplitPlan(10, 5))
    assert [c.shape[1] for c in spy.seen] == [10, 11, 12, 13, 14]
    for seen in spy.seen:
        np.testing.assert_array_equal(seen, small_panel.counts[:, : seen.shape[1]])


def test_rolling_forecast_rejects_bad_plan(small_panel):
    with pytest.raises(DataError):
        rolling_forecast(small_panel, _HistorySpy(), SplitPlan(12, 5))


def test_pearson_residuals_hand_values():
    panel = make_panel([[3, 10, 7]])
    mean = np.array([[1.0, 5.0, 7.0]])
    var = np.array([[1.0, 4.0, 9.0]])
    summary = pearson_residuals(panel, mean, var)
    np.testing.assert_allclose(summary.residuals, [[2.5, 0.0]])
    assert summary.variances[0] == pytest.approx(np.var([2.5, 0.0], ddof=1))
    assert summary.excluded == []


def test_pearson_residuals_exclude_zero_variance():
    panel = make_panel([[0, 0, 0, 4]])
    summary = pearson_residuals(panel, np.zeros((1, 4)), np.array([[1.0, 0.0, 0.0, 2.0]]))
    assert summary.excluded == [("school-0", 2001), ("school-0", 2002)]
    assert np.isnan(summary.residuals[0, :2]).all()
    assert np.isnan(summary.variances[0])


def test_residual_acf_shapes():
    residuals = np.random.default_rng(0).normal(size=(3, 40))
    residuals[2] = 1.0
    acf, band = residual_acf(residuals, max_lag=5)
    assert acf.shape == (3, 6)
    np.testing.assert_allclose(acf[:2, 0], 1.0)
    assert np.isnan(acf[2]).all()
    assert band[0] == pytest.approx(1.96 / np.sqrt(40))


def test_dispersion_summary():
    frame = dispersion_summary({"a": np.array([1.0, 2.0, 3.0, np.nan]), "b": np.array([np.nan])})
    assert frame["model"].tolist() == ["a"]
    assert frame.loc[0, "median"] == 2.0
    assert frame.loc[0, "n_schools"] == 3
