"""Data structures for per-school forecasts."""
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np
import pandas as pd

if TYPE_CHECKING:
    from src.panel_data import PanelSeries


@dataclass(frozen=True)
class ForecastSet:
    """One model's one-step forecasts for every school in one target year."""
    model_tag: str
    year: int
    school_ids: Tuple[str, ...]
    point: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None
    actual: Optional[np.ndarray] = None
    level: float = 0.95

    def __post_init__(self):
        n = len(self.school_ids)
        object.__setattr__(self, "school_ids", tuple(self.school_ids))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        if self.point.shape != (n,):
            raise ValueError(f"point has shape {self.point.shape}, expected ({n},)")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("interval bounds must be given together")
        if self.lower is not None:
            lower = np.asarray(self.lower, dtype=float)
            upper = np.asarray(self.upper, dtype=float)
            if lower.shape != (n,) or upper.shape != (n,):
                raise ValueError("interval bounds must have one entry per school")
            if np.any(lower > upper):
                raise ValueError("interval lower bound exceeds upper bound")
            object.__setattr__(self, "lower", lower)
            object.__setattr__(self, "upper", upper)
        if self.samples is not None and np.shape(self.samples)[0] != n:
            raise ValueError("samples must have one row per school")
        if self.actual is not None:
            object.__setattr__(self, "actual", np.asarray(self.actual, dtype=float))

    @property
    def has_interval(self) -> bool:
        return self.lower is not None

    def key(self) -> str:
        """Stable key for this model-year."""
        return f"{self.model_tag}@{self.year}"

    def with_actual(self, actual) -> "ForecastSet":
        return replace(self, actual=np.asarray(actual, dtype=float))

    def to_frame(self) -> pd.DataFrame:
        """Long table: model, year, school_id, point, lower, upper, actual."""
        n = len(self.school_ids)
        missing = np.full(n, np.nan)
        return pd.DataFrame({
            "model": self.model_tag,
            "year": self.year,
            "school_id": list(self.school_ids),
            "point": self.point,
            "lower": self.lower if self.has_interval else missing,
            "upper": self.upper if self.has_interval else missing,
            "actual": self.actual if self.actual is not None else missing,
        })


@dataclass(frozen=True)
class ForecastOrigin:
    """Everything known when forecasting the year at target_index."""
    history: "PanelSeries"
    x_next: np.ndarray
    year: int
    target_index: int

    @classmethod
    def from_panel(cls, panel: "PanelSeries", target_index: int) -> "ForecastOrigin":
        if not 1 <= target_index < panel.T:
            raise ValueError(f"target_index must be in [1, {panel.T - 1}], got {target_index}")
        return cls(panel.truncate(target_index), panel.covariates[:, target_index],
                   int(panel.years[target_index]), target_index)
