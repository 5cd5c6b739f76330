"""Tests for the synthetic panel generators."""
import numpy as np
import pytest

from src.config import ReservoirSpec
from src.generators import HierNBESNGenerator, IngarchGenerator, create_generator


def test_generator_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        create_generator("iid-poisson", n_states=0, schools_per_state=2, T=5, seed=0)
    with pytest.raises(ValueError):
        IngarchGenerator(n_states=1, schools_per_state=1, T=5, seed=0, alpha1=0.6, beta1=0.5)
    with pytest.raises(ValueError):
        HierNBESNGenerator(n_states=1, schools_per_state=1, T=5, seed=0, dispersion=0.0)


def test_school_space_and_years():
    panel, _ = create_generator("iid-poisson", n_states=2, schools_per_state=3, T=4, seed=1,
                                start_year=1990).generate()
    assert panel.school_ids[:2] == ("S01-001", "S01-002")
    assert panel.state_of.tolist() == [0, 0, 0, 1, 1, 1]
    assert panel.years.tolist() == [1990, 1991, 1992, 1993]
    assert panel.r == 2


def test_single_year_panel_uses_intercept_covariate():
    panel, _ = create_generator("iid-poisson", n_states=1, schools_per_state=2, T=1, seed=1).generate()
    assert panel.r == 1
    np.testing.assert_array_equal(panel.covariates, 1.0)


def test_ingarch_generator_stationary_mean():
    panel, truth = create_generator("ingarch", n_states=2, schools_per_state=5, T=500, seed=2,
                                    beta0=3.0, alpha1=0.2, beta1=0.5).generate()
    assert truth["alpha1"] == 0.2
    assert panel.counts.mean() == pytest.approx(3.0 / 0.3, rel=0.05)


def test_hierarchical_truth_layout():
    spec = ReservoirSpec(n_h=4, seed=3)
    panel, truth = create_generator("hier-nb-esn", n_states=3, schools_per_state=2, T=10, seed=4,
                                    reservoir=spec, dispersion=3.0).generate()
    assert truth["eta"].shape == (3, 4)
    assert truth["eta_tilde"].shape == (3 * 4 + 3,)
    np.testing.assert_array_equal(truth["eta_tilde"][-3:], truth["delta"])
    np.testing.assert_array_equal(truth["r"], np.full(6, 3.0))
    assert truth["reservoir"]["r"] == panel.r
    assert panel.counts.min() >= 0


def test_poisson_generator_zero_scale_has_zero_coefficients():
    _, truth = create_generator("hier-poisson-esn", n_states=2, schools_per_state=2, T=6, seed=5,
                                sigma_eta=0.0, sigma_delta=0.0, mean_level=12.0).generate()
    np.testing.assert_array_equal(truth["eta"], 0.0)
    np.testing.assert_allclose(truth["delta"], np.log(12.0))


def test_generators_replay_from_seed():
    a, _ = create_generator("hier-nb-esn", n_states=2, schools_per_state=2, T=8, seed=6).generate()
    b, _ = create_generator("hier-nb-esn", n_states=2, schools_per_state=2, T=8, seed=6).generate()
    np.testing.assert_array_equal(a.counts, b.counts)
