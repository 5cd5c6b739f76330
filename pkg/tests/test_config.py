"""Tests for configuration loading and validation."""
from pathlib import Path

import pytest
import yaml

from conftest import tiny_config, write_config
from src.config import Config, ModelConfig, ReservoirGrid, ReservoirSpec, load_config
from src.errors import ConfigError

CONFIG_DIR = Path(__file__).parent.parent / "configs"


@pytest.mark.parametrize("name", ["quick.example.yaml", "synthetic_nb.example.yaml", "gss.example.yaml"])
def test_example_configs_load(name, monkeypatch):
    monkeypatch.delenv("COUNTESN_SEED", raising=False)
    config = load_config(str(CONFIG_DIR / name))
    assert config.models
    assert config.global_.seed in (42, 2023)


def test_chain_defaults_per_model():
    assert (ModelConfig(name="hier-nb-esn").n_iter, ModelConfig(name="hier-nb-esn").burn_in) == (3000, 1000)
    hp = ModelConfig(name="hier-poisson-esn")
    assert (hp.n_iter, hp.burn_in, hp.thin) == (2500, 500, 2)
    assert ModelConfig(name="bayes-poisson-esn").n_iter == 1000
    assert ModelConfig(name="hier-nb-esn", n_iter=50, burn_in=10).burn_in == 10


def test_invalid_model_settings():
    with pytest.raises(ValueError):
        ModelConfig(name="hier-nb-esn", n_iter=100, burn_in=100)
    with pytest.raises(ValueError):
        ModelConfig(name="hier-nb-esn", thin=0)
    with pytest.raises(ValueError):
        ModelConfig(name="ensemble-poisson-esn", ensemble_size=1)
    with pytest.raises(ValueError):
        ModelConfig(name="arima")


def test_structural_validation(tmp_path):
    raw = tiny_config(tmp_path)
    raw["models"].append({"name": "intercept"})
    with pytest.raises(ValueError, match="unique"):
        Config(**raw)

    raw = tiny_config(tmp_path)
    raw["data"]["path"] = "panel.csv"
    with pytest.raises(ValueError, match="exactly one"):
        Config(**raw)

    raw = tiny_config(tmp_path)
    raw["split"]["first_target_year"] = 2010
    with pytest.raises(ValueError, match="exactly one"):
        Config(**raw)

    raw = tiny_config(tmp_path)
    raw["data"]["simulation"].update(dgp="ingarch", alpha1=0.7, beta1=0.4)
    with pytest.raises(ValueError, match="alpha1 \\+ beta1"):
        Config(**raw)


def test_load_errors_are_config_errors(tmp_path):
    raw = tiny_config(tmp_path)
    raw["models"] = []
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path / "c.yaml", raw))
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "absent.yaml"))


def test_environment_overrides(tmp_path, monkeypatch):
    path = write_config(tmp_path / "c.yaml", tiny_config(tmp_path))
    monkeypatch.setenv("LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("COUNTESN_SEED", "123")
    config = load_config(path)
    assert config.global_.log_level == "DEBUG"
    assert config.global_.seed == 123

    monkeypatch.setenv("COUNTESN_SEED", "abc")
    with pytest.raises(ConfigError, match="integer"):
        load_config(path)


def test_empty_yaml_is_a_config_error(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_select_models(tmp_path):
    config = Config(**tiny_config(tmp_path))
    picked = config.select_models(["hier-nb-esn", "intercept"])
    assert [m.name for m in picked.models] == ["intercept", "hier-nb-esn"]
    assert len(config.models) == 7
    with pytest.raises(ConfigError):
        config.select_models(["arima"])
    with pytest.raises(ConfigError):
        Config(**tiny_config(tmp_path, ["intercept"])).select_models(["ingarch11"])
    with pytest.raises(ConfigError):
        picked.model("single-poisson-esn")
    assert picked.model("intercept").name == "intercept"


def test_global_alias_round_trips(tmp_path):
    raw = yaml.safe_load(yaml.safe_dump(tiny_config(tmp_path)))
    assert Config(**raw).global_.output_dir == str(tmp_path)


def test_reservoir_grid_candidates():
    base = ReservoirSpec(n_h=20, seed=5)
    assert ReservoirGrid().candidates(base) == [base]

    grid = ReservoirGrid(a=[0.01, 0.1, 1.0], pi=[0.1, 0.3, 0.5], n_h=[30, 50, 100, 120], nu=[0.5, 0.7, 0.9])
    specs = grid.candidates(base)
    assert len(specs) == 3 * 3 * 4 * 3
    assert (specs[0].a_w, specs[0].pi_w, specs[0].n_h, specs[0].nu) == (0.01, 0.1, 30, 0.5)
    assert (specs[1].n_h, specs[1].nu) == (30, 0.7)
    assert (specs[-1].a_w, specs[-1].pi_w, specs[-1].n_h, specs[-1].nu) == (1.0, 0.5, 120, 0.9)
    assert all(s.a_w == s.a_uY == s.a_uX and s.pi_w == s.pi_uY == s.pi_uX for s in specs)
    assert {s.seed for s in specs} == {5}


def test_reservoir_grid_validation():
    for bad in ({"a": [-0.1]}, {"pi": [1.5]}, {"n_h": [0]}, {"nu": [0.0]}):
        with pytest.raises(ValueError):
            ReservoirGrid(**bad)
    config = ModelConfig(name="single-poisson-esn", cross_validate=True, reservoir_grid={"n_h": [10, 20]})
    assert config.reservoir_grid.n_h == [10, 20]
