"""Shared fixtures and the --runslow switch."""
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

# Add repository root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.panel_data import PanelSeries, default_covariates  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long Monte Carlo acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_panel(counts, states=None, start_year=2000, covariates="default") -> PanelSeries:
    """Small panel from a count matrix; one state per school unless given."""
    counts = np.asarray(counts)
    n, t = counts.shape
    states = list(range(n)) if states is None else list(states)
    labels = tuple(f"S{k}" for k in range(max(states) + 1))
    panel = PanelSeries(
        counts=counts,
        school_ids=tuple(f"school-{i}" for i in range(n)),
        state_of=np.asarray(states),
        state_labels=labels,
        years=np.arange(start_year, start_year + t),
        covariates=np.ones((n, t, 1)),
    )
    return default_covariates(panel) if covariates == "default" else panel


def tiny_config(out_dir, models=None) -> dict:
    """Raw config for a seconds-long run of the whole pipeline."""
    reservoir = {"n_h": 4, "pi_w": 0.5, "pi_uY": 0.5, "pi_uX": 0.5, "a_w": 0.3, "a_uY": 0.3, "a_uX": 0.3}
    all_models = [
        {"name": "intercept"},
        {"name": "ingarch11"},
        {"name": "single-poisson-esn", "reservoir": reservoir},
        {"name": "ensemble-poisson-esn", "ensemble_size": 2, "ensemble_draws": 5, "reservoir": reservoir},
        {"name": "bayes-poisson-esn", "n_iter": 20, "n_pred_samples": 50, "reservoir": reservoir},
        {"name": "hier-poisson-esn", "n_iter": 12, "burn_in": 2, "thin": 2, "n_pred_samples": 50,
         "reservoir": reservoir},
        {"name": "hier-nb-esn", "n_iter": 12, "burn_in": 2, "thin": 2, "n_pred_samples": 50,
         "reservoir": reservoir},
    ]
    if models is not None:
        all_models = [m for m in all_models if m["name"] in models]
    return {
        "global": {"seed": 5, "log_level": "WARNING", "workers": 1, "output_dir": str(out_dir)},
        "data": {"simulation": {"dgp": "hier-nb-esn", "n_states": 2, "schools_per_state": 2, "T": 12,
                                "start_year": 2000, "reservoir": {"n_h": 4, "seed": 1}}},
        "split": {"train_end_index": 10, "horizon": 2},
        "models": all_models,
        "scoring": {"interval_level": 0.95, "acf_max_lag": 3},
    }


def write_config(path, raw: dict) -> str:
    with open(path, "w") as f:
        yaml.safe_dump(raw, f)
    return str(path)


@pytest.fixture
def small_panel() -> PanelSeries:
    rng = np.random.default_rng(0)
    return make_panel(rng.poisson(8.0, size=(4, 15)), states=[0, 0, 1, 1])
