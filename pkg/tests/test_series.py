"""Tests for forecast sets and forecast origins."""
import numpy as np
import pytest

from src.series import ForecastOrigin, ForecastSet


def test_forecast_set_validates_shapes():
    with pytest.raises(ValueError):
        ForecastSet("m", 2020, ("a", "b"), [1.0])
    with pytest.raises(ValueError):
        ForecastSet("m", 2020, ("a",), [1.0], lower=[0.0])
    with pytest.raises(ValueError):
        ForecastSet("m", 2020, ("a",), [1.0], lower=[3.0], upper=[2.0])
    with pytest.raises(ValueError):
        ForecastSet("m", 2020, ("a", "b"), [1.0, 2.0], samples=np.zeros((3, 5)))


def test_forecast_set_frame_and_key():
    fs = ForecastSet("intercept", 2019, ["a", "b"], [1.5, 2.5]).with_actual([1, 3])
    assert fs.key() == "intercept@2019"
    assert not fs.has_interval
    frame = fs.to_frame()
    assert list(frame.columns) == ["model", "year", "school_id", "point", "lower", "upper", "actual"]
    assert frame["lower"].isna().all()
    assert frame["actual"].tolist() == [1.0, 3.0]


def test_origin_from_panel(small_panel):
    origin = ForecastOrigin.from_panel(small_panel, 10)
    assert origin.history.T == 10
    assert origin.year == int(small_panel.years[10])
    np.testing.assert_array_equal(origin.x_next, small_panel.covariates[:, 10])
    with pytest.raises(ValueError):
        ForecastOrigin.from_panel(small_panel, 0)
    with pytest.raises(ValueError):
        ForecastOrigin.from_panel(small_panel, small_panel.T)
