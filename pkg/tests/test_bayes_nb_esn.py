"""Tests for the negative binomial likelihood and the Polya-Gamma Gibbs sampler."""
import numpy as np
import pytest
from scipy import stats

from conftest import make_panel
from src.bayes_nb_esn import (
    HierNBESNFit,
    NBDesign,
    NBSamplerSettings,
    NBState,
    draw_eta_tilde_nb,
    fit_hier_nb,
    gibbs_sweep_nb,
    nb_loglik_school,
    nb_logpmf,
    update_r,
)
from src.config import ReservoirSpec
from src.errors import NumericalError
from src.reservoir import gen_weights, run_states


def _initial_state(design, r=10.0, variance=1.0):
    return NBState(
        eta_tilde=np.zeros(design.width),
        sigma_eta2=variance,
        sigma_delta2=variance,
        r=np.full(design.N, r),
        omega=np.ones((design.N, design.T)),
        r_accepted=np.zeros(design.N, dtype=np.int64),
    )


def test_nb_loglik_hand_value():
    assert nb_loglik_school(np.array([0]), np.array([0.0]), 1.0) == pytest.approx(np.log(0.5))
    with pytest.raises(ValueError):
        nb_loglik_school(np.array([1]), np.array([0.0]), 0.0)


def test_nb_poisson_limit():
    y = np.arange(0, 20)
    r, mu = 1e7, 4.0
    np.testing.assert_allclose(nb_logpmf(y, np.log(mu / r), r), stats.poisson.logpmf(y, mu), atol=1e-4)


def test_nb_mean_and_variance():
    y = np.arange(0, 3000)
    r, psi = 2.0, np.log(3.0)
    pmf = np.exp(nb_logpmf(y, psi, r))
    assert pmf.sum() == pytest.approx(1.0, abs=1e-10)
    mean = np.sum(y * pmf)
    assert mean == pytest.approx(6.0, rel=1e-8)
    assert np.sum((y - mean) ** 2 * pmf) == pytest.approx(6.0 * 4.0, rel=1e-8)


def test_design_blocks_cover_each_state(small_panel):
    states = np.random.default_rng(0).uniform(-1, 1, size=(small_panel.N, small_panel.T, 3))
    design = NBDesign(small_panel, states)
    assert design.width == 3 * small_panel.n_states + small_panel.n_states
    rows = np.concatenate([b[0] for b in design.blocks])
    assert sorted(rows.tolist()) == list(range(small_panel.N * small_panel.T))
    for rows, cols, X in design.blocks:
        np.testing.assert_allclose(design.H_tilde[rows][:, cols].toarray(), X)


def test_coefficient_conditional_follows_kappa_sign():
    panel = make_panel(np.full((2, 5), 20), states=[0, 0])
    design = NBDesign(panel, np.zeros((2, 5, 2)))
    omega, r = np.ones((2, 5)), np.full(2, 2.0)
    rng = np.random.default_rng(1)
    draws = np.array([draw_eta_tilde_nb(design, omega, r, 1.0, 1.0, rng) for _ in range(4000)])

    # kappa = (20 - 2) / 2 = 9 on ten rows, unit omega and unit prior precision
    assert draws[:, 2].mean() == pytest.approx(90.0 / 11.0, abs=0.03)
    assert draws[:, 2].var() == pytest.approx(1.0 / 11.0, rel=0.1)
    assert abs(draws[:, :2].mean()) < 0.05
    assert draws[:, :2].var() == pytest.approx(1.0, rel=0.1)

    low = make_panel(np.zeros((2, 5), dtype=int), states=[0, 0])
    low_design = NBDesign(low, np.zeros((2, 5, 2)))
    low_draws = np.array([draw_eta_tilde_nb(low_design, omega, r, 1.0, 1.0, rng) for _ in range(500)])
    assert low_draws[:, 2].mean() < 0


def test_omega_draws_match_polya_gamma_mean():
    panel = make_panel(np.full((4, 15), 6), states=[0, 0, 1, 1])
    design = NBDesign(panel, np.zeros((4, 15, 2)))
    rng = np.random.default_rng(2)
    omegas = np.concatenate([
        gibbs_sweep_nb(_initial_state(design, r=10.0), design, rng).omega.reshape(-1) for _ in range(20)
    ])
    # PG(16, 0) has mean 4 and variance 16/24
    assert abs(omegas.mean() - 4.0) < 4 * np.sqrt(16.0 / 24.0 / omegas.size)


def test_update_r_stays_positive_and_counts_acceptance():
    rng = np.random.default_rng(3)
    y = rng.negative_binomial(2.0, 0.25, size=(3, 40)).astype(float)
    psi = np.full((3, 40), np.log(3.0))
    r = np.array([0.5, 5.0, 30.0])
    accepted = np.zeros(3, dtype=int)
    for _ in range(500):
        r, ok = update_r(r, y, psi, 10.0, rng)
        accepted += ok
        assert np.all(r > 0)
    assert np.all(accepted > 0)


def test_sweep_outputs_are_positive(small_panel):
    states = np.random.default_rng(4).uniform(-1, 1, size=(small_panel.N, small_panel.T, 3))
    design = NBDesign(small_panel, states)
    state = _initial_state(design)
    rng = np.random.default_rng(5)
    for _ in range(5):
        state = gibbs_sweep_nb(state, design, rng, NBSamplerSettings(pg_method="series", pg_truncation=50))
    assert state.sigma_eta2 > 0 and state.sigma_delta2 > 0
    assert np.all(state.r > 0)
    assert np.all(state.omega > 0)
    assert np.all(np.isfinite(state.eta_tilde))


def _weights(panel):
    return gen_weights(ReservoirSpec(n_h=4, r=panel.r, pi_w=0.5, pi_uY=0.5, pi_uX=0.5,
                                     a_w=0.3, a_uY=0.3, a_uX=0.3, seed=2))


def test_chain_bookkeeping_and_determinism(small_panel):
    w = _weights(small_panel)
    states = run_states(small_panel, w, w.spec.nu)
    a = fit_hier_nb(small_panel, states, 25, np.random.default_rng(6), burn_in=5, thin=4)
    b = fit_hier_nb(small_panel, states, 25, np.random.default_rng(6), burn_in=5, thin=4)

    assert a.n_saved == 5
    assert a.eta_blocks().shape == (5, small_panel.n_states, 4)
    assert a.r_draws.shape == (5, small_panel.N)
    assert np.all(a.r_draws > 0)
    assert np.all(a.sigma_eta2_chain > 0)
    assert np.all((a.r_accept >= 0) & (a.r_accept <= 1))
    np.testing.assert_array_equal(a.eta_tilde_draws, b.eta_tilde_draws)
    np.testing.assert_array_equal(a.r_draws, b.r_draws)

    with pytest.raises(ValueError):
        fit_hier_nb(small_panel, states, 5, np.random.default_rng(0), burn_in=5)


def test_fit_predictive_and_moments(small_panel, tmp_path):
    w = _weights(small_panel)
    states = run_states(small_panel, w, w.spec.nu)
    chain = fit_hier_nb(small_panel, states, 20, np.random.default_rng(7), burn_in=4, thin=2)
    fit = HierNBESNFit(w, chain, small_panel.state_of, w.spec.nu)

    samples = fit.predictive(small_panel, small_panel.covariates[:, -1], 100, np.random.default_rng(8))
    assert samples.shape == (small_panel.N, 100)
    assert samples.min() >= 0

    mean, var = fit.fitted_moments(small_panel, states)
    assert mean.shape == (small_panel.N, small_panel.T)
    assert np.all(var > mean)

    path = str(tmp_path / "chain.npz")
    chain.save(path)
    with np.load(path) as data:
        assert data["r"].shape == chain.r_draws.shape
        assert int(data["n_iter"]) == 20


@pytest.mark.slow
def test_recovers_negative_binomial_level_and_dispersion():
    rng = np.random.default_rng(9)
    counts = rng.negative_binomial(2.0, 1.0 / (1.0 + 3.0), size=(4, 200))  # mean 6
    panel = make_panel(counts, states=[0, 0, 0, 0])
    chain = fit_hier_nb(panel, np.zeros((4, 200, 2)), 800, np.random.default_rng(10), burn_in=300, thin=2)
    r_bar = chain.r_draws.mean()
    assert 1.3 < r_bar < 3.0
    level = (chain.r_draws * np.exp(chain.deltas()[:, [0]])).mean()
    assert level == pytest.approx(counts.mean(), rel=0.1)


def test_singular_precision_raises():
    from src.bayes_nb_esn import _draw_gaussian_block

    with pytest.raises(NumericalError):
        _draw_gaussian_block(-np.eye(2), np.zeros(2), np.random.default_rng(0))


@pytest.mark.slow
def test_poisson_counts_shut_off_overdispersion():
    counts = np.random.default_rng(30).poisson(10.0, size=(4, 200))
    panel = make_panel(counts, states=[0, 0, 0, 0])
    # r and delta trade off along a ridge, so the walk starts inside the bulk
    chain = fit_hier_nb(panel, np.zeros((4, 200, 2)), 4000, np.random.default_rng(31), burn_in=1000, thin=3,
                        r_init=100.0)
    r_medians = np.median(chain.r_draws, axis=0)
    assert np.median(r_medians) > 50
    level = (chain.r_draws * np.exp(chain.deltas()[:, [0]])).mean()
    assert level == pytest.approx(10.0, rel=0.05)
