"""Long Monte Carlo checks on synthetic panels; run with --runslow."""
import numpy as np
import pandas as pd
import pytest
from scipy import integrate, stats
from scipy.special import expit

from conftest import make_panel
from src.bayes_nb_esn import NBDesign, NBSamplerSettings, NBState, gibbs_sweep_nb
from src.bayes_poisson_esn import log_fc_sigma, mh_scale_step
from src.config import Config, ModelConfig, ReservoirSpec
from src.engine import PipelineEngine, derive_seed
from src.evaluate import AVERAGE_LABEL, icr, pearson_residuals
from src.models import ModelContext, create_model
from src.panel_data import simulate_panel
from src.rand_dists import sample_lg
from src.series import ForecastOrigin

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def nb_panel():
    panel, _ = simulate_panel("hier-nb-esn", 20, 5, 50, seed=2024, dispersion=2.0,
                              reservoir=ReservoirSpec(n_h=30))
    return panel


def test_sigma_chain_matches_its_full_conditional():
    alpha, upsilon = 1000.0, 100.0
    block = np.random.default_rng(0).normal(0.0, 0.5, size=20)

    grid = np.linspace(1e-3, 3.0, 20_001)
    logp = np.array([log_fc_sigma(s, block, upsilon, alpha) for s in grid])
    dens = np.exp(logp - logp.max())
    cdf = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
    cdf /= cdf[-1]

    rng = np.random.default_rng(1)
    value, draws = 0.5, []
    for it in range(200_000):
        value, _ = mh_scale_step(value, lambda s: log_fc_sigma(s, block, upsilon, alpha), 0.5, rng)
        if it >= 10_000 and it % 40 == 0:
            draws.append(value)
    statistic = stats.kstest(draws, lambda x: np.interp(x, grid, cdf)).statistic
    assert statistic < 0.05


def test_nb_recovers_dispersion_and_covers(nb_panel):
    origin = ForecastOrigin.from_panel(nb_panel, 49)
    model = create_model(ModelConfig(name="hier-nb-esn", n_iter=2000, burn_in=1000, thin=2),
                         ModelContext(reservoir_seed=0, chain_seed=11))
    model.fit(origin.history)
    r_medians = np.median(model.result.chain.r_draws, axis=0)
    assert 1.4 <= np.median(r_medians) <= 2.8

    fs = model.forecast(origin, np.random.default_rng(12)).with_actual(nb_panel.counts[:, 49])
    assert 0.88 <= icr(fs) <= 0.99


def test_residual_dispersion_separates_nb_from_poisson(nb_panel):
    variances = {}
    for name, extra in (("hier-nb-esn", {"n_iter": 1200, "burn_in": 600}),
                        ("hier-poisson-esn", {"n_iter": 600, "burn_in": 200})):
        model = create_model(ModelConfig(name=name, thin=2, **extra),
                             ModelContext(reservoir_seed=0, chain_seed=13))
        model.fit(nb_panel)
        mean, variance = model.conditional_moments(nb_panel)
        variances[name] = np.nanmedian(pearson_residuals(nb_panel, mean, variance).variances)
    assert 0.7 <= variances["hier-nb-esn"] <= 1.3
    assert variances["hier-poisson-esn"] > 1.3


def _batch_se(x, n_batches=50):
    """Monte Carlo standard error of a chain average from batch means."""
    batches = np.asarray(x)[: len(x) // n_batches * n_batches].reshape(n_batches, -1).mean(axis=1)
    return batches.std(ddof=1) / np.sqrt(n_batches)


def _assert_geweke(forward, coupled):
    """Forward (i.i.d.) and successive-conditional moments agree within 3 standard errors."""
    for name in forward:
        f, c = np.asarray(forward[name]), np.asarray(coupled[name])
        se = np.sqrt(f.var() / len(f) + _batch_se(c) ** 2)
        assert abs(f.mean() - c.mean()) < 3 * se, name


def _scale_tests(sigmas, upsilon):
    sigmas = np.asarray(sigmas)
    return {"log": np.log(sigmas / upsilon), "below": (sigmas < upsilon).astype(float)}


def test_scale_updates_keep_the_hierarchical_prior():
    # two states, n_h = 3: an eta block of 6 and a delta block of 2
    alpha, upsilon, cap, n = 1000.0, 1.0, 1e6, 40_000
    dims = {"eta": 6, "delta": 2}
    rng = np.random.default_rng(40)

    def block(sigma, d):
        return sigma * np.sqrt(alpha) * sample_lg(alpha, alpha, rng, size=d)

    forward, coupled = {}, {}
    for name, d in dims.items():
        prior = upsilon * np.abs(rng.standard_cauchy(n))
        for key, values in _scale_tests(prior, upsilon).items():
            forward[f"{name}_{key}"] = values

        sigma, chain = upsilon * abs(rng.standard_cauchy()), np.empty(n)
        for k in range(n):
            eta = block(sigma, d)
            sigma, _ = mh_scale_step(sigma, lambda s: log_fc_sigma(s, eta, upsilon, alpha), cap, rng)
            chain[k] = sigma
        for key, values in _scale_tests(chain, upsilon).items():
            coupled[f"{name}_{key}"] = values

    _assert_geweke(forward, coupled)


def _nb_prior_state(design, settings, rng):
    sigma_eta2 = stats.invgamma.rvs(settings.ig_shape, scale=settings.ig_rate, random_state=rng)
    sigma_delta2 = stats.invgamma.rvs(settings.ig_shape, scale=settings.ig_rate, random_state=rng)
    n_eta = design.n_h * design.n_states
    eta_tilde = np.concatenate([rng.normal(0.0, np.sqrt(sigma_eta2), n_eta),
                                rng.normal(0.0, np.sqrt(sigma_delta2), design.n_states)])
    return NBState(eta_tilde, float(sigma_eta2), float(sigma_delta2), np.abs(rng.standard_cauchy(design.N)),
                   np.ones((design.N, design.T)), np.zeros(design.N, dtype=np.int64))


def _nb_counts(state, design, rng):
    psi = design.linear_predictor(state.eta_tilde)
    return rng.negative_binomial(state.r[:, None], expit(-psi)).astype(float)


def _nb_tests(draws):
    return {
        "log_r": [np.log(s.r).mean() for s in draws],
        "r_above_one": [(s.r > 1.0).mean() for s in draws],
        "eta_sq": [s.eta_tilde[0] ** 2 for s in draws],
        "delta_sq": [s.eta_tilde[-1] ** 2 for s in draws],
        "log_sigma_eta2": [np.log(s.sigma_eta2) for s in draws],
    }


def test_nb_sweep_keeps_the_joint_distribution():
    # one state, two schools, T = 10, one fixed hidden unit
    panel = make_panel(np.zeros((2, 10), dtype=int), states=[0, 0])
    design = NBDesign(panel, np.random.default_rng(41).uniform(-1.0, 1.0, size=(2, 10, 1)))
    # proper variance priors; the proposal half-width min(cap, r) = r scales with r
    settings = NBSamplerSettings(ig_shape=3.0, ig_rate=2.0, r_step_cap=1e6, pg_method="series",
                                 pg_truncation=200)
    rng = np.random.default_rng(42)
    n = 50_000

    forward = _nb_tests([_nb_prior_state(design, settings, rng) for _ in range(n)])

    state, chain = _nb_prior_state(design, settings, rng), []
    for _ in range(n):
        # only the counts change between sweeps
        design.y = _nb_counts(state, design, rng)
        state = gibbs_sweep_nb(state, design, rng, settings)
        chain.append(state)
    _assert_geweke(forward, _nb_tests(chain))


ORDERING_SEED = 2024
ORDERING_RESERVOIR = {"n_h": 10, "pi_w": 0.5, "pi_uY": 0.5, "pi_uX": 0.5,
                      "a_w": 0.3, "a_uY": 0.3, "a_uX": 0.3, "nu": 0.9}


def test_hierarchical_nb_leads_on_overdispersed_panel(tmp_path):
    raw = {
        "global": {"seed": ORDERING_SEED, "log_level": "WARNING", "workers": 1, "output_dir": str(tmp_path)},
        "data": {"simulation": {
            "dgp": "hier-nb-esn", "n_states": 20, "schools_per_state": 5, "T": 50,
            "dispersion": 5.0, "sigma_eta": 0.15, "sigma_delta": 0.5,
            # the panel is rolled through the reservoir every ESN of the run draws
            "reservoir": {**ORDERING_RESERVOIR, "seed": derive_seed(ORDERING_SEED, "reservoir")},
        }},
        "split": {"train_end_index": 45, "horizon": 5},
        "models": [
            {"name": "intercept"},
            {"name": "single-poisson-esn", "reservoir": ORDERING_RESERVOIR},
            {"name": "hier-nb-esn", "n_iter": 1500, "burn_in": 500, "thin": 2,
             "reservoir": ORDERING_RESERVOIR},
        ],
        "scoring": {"interval_level": 0.95},
    }
    engine = PipelineEngine(Config(**raw))
    for stage in ("simulate", "fit", "forecast", "score"):
        engine.run_stage(stage)

    scores = pd.read_csv(tmp_path / "scores" / "scores.csv", dtype={"year": str})
    assert (scores["year"] != AVERAGE_LABEL).sum() == 3 * 5
    average = scores[scores["year"] == AVERAGE_LABEL].set_index("model")
    assert average.loc["hier-nb-esn", "mslpe"] < average.loc["intercept", "mslpe"]
    assert average.loc["hier-nb-esn", "mspe"] < average.loc["single-poisson-esn", "mspe"]
