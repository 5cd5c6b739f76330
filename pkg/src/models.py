"""Model ladder behind one interface: fit on a panel, forecast one year ahead, expose conditional moments."""
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import json
import logging
import os
import time

import numpy as np

from src.baselines import IngarchFit, fit_ingarch11, fit_intercept, ingarch_intensity, poisson_intervals
from src.bayes_nb_esn import HierNBESNFit, NBSamplerSettings, fit_hier_nb
from src.bayes_poisson_esn import BayesPoissonESNFit, HierPoissonESNFit, fit_bayes_poisson_panel, fit_hier_poisson
from src.config import MLGConfig, ModelConfig, PolyaGammaConfig, ReservoirSpec
from src.freq_esn import (
    CVResult,
    EnsembleFit,
    SingleESNFit,
    ensemble_predictive,
    fit_ensemble_esn,
    fit_single_esn,
    select_hyperparameters,
)
from src.panel_data import PanelSeries
from src.reservoir import gen_weights, run_states
from src.series import ForecastOrigin, ForecastSet

logger = logging.getLogger(__name__)


@dataclass
class ModelContext:
    """Run-level settings every model needs: derived seeds, workers, levels, sampler constants."""
    reservoir_seed: int = 0
    chain_seed: int = 0
    workers: int = 1
    level: float = 0.95
    mlg: MLGConfig = field(default_factory=MLGConfig)
    polya_gamma: PolyaGammaConfig = field(default_factory=PolyaGammaConfig)


def _interval_from_samples(samples: np.ndarray, level: float) -> Tuple[np.ndarray, np.ndarray]:
    tail = 100.0 * (1.0 - level) / 2.0
    lower, upper = np.percentile(samples, [tail, 100.0 - tail], axis=1)
    return lower, upper


def _write_json(path: str, payload: Dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


class CountModel(ABC):
    """Base class for count forecasting models."""

    def __init__(self, config: ModelConfig, context: ModelContext):
        self.name = config.name
        self.config = config
        self.context = context
        self.fitted = False

    def _reservoir_spec(self, panel: PanelSeries) -> ReservoirSpec:
        return self.config.reservoir.model_copy(update={"r": panel.r, "seed": self.context.reservoir_seed})

    def _chain_rng(self, panel: PanelSeries) -> np.random.Generator:
        # one stream per history length keeps every rolling refit reproducible
        return np.random.default_rng([self.context.chain_seed, panel.T])

    def _check_fitted(self):
        if not self.fitted:
            raise RuntimeError(f"Model '{self.name}' has not been fit")

    @abstractmethod
    def fit(self, panel: PanelSeries) -> "CountModel":
        """Fit on the whole panel."""
        pass

    @abstractmethod
    def forecast(self, origin: ForecastOrigin, rng: np.random.Generator) -> ForecastSet:
        """One-step forecasts for the year after origin.history."""
        pass

    @abstractmethod
    def conditional_moments(self, panel: PanelSeries) -> Tuple[np.ndarray, np.ndarray]:
        """In-sample conditional mean and variance, each (N, T), given the fit on this panel."""
        pass

    @abstractmethod
    def to_dict(self) -> Dict:
        pass

    def save(self, directory: str) -> List[str]:
        """Write fit artifacts; returns the file names written."""
        os.makedirs(directory, exist_ok=True)
        _write_json(os.path.join(directory, "fit.json"), {"model": self.name, **self.to_dict()})
        return ["fit.json"]


class InterceptModel(CountModel):
    """Per-school sample mean."""

    def fit(self, panel: PanelSeries) -> "InterceptModel":
        self.means = np.array([fit_intercept(y) for y in panel.counts])
        self.school_ids = panel.school_ids
        self.fitted = True
        return self

    def forecast(self, origin: ForecastOrigin, rng: np.random.Generator) -> ForecastSet:
        self._check_fitted()
        return ForecastSet(self.name, origin.year, origin.history.school_ids, self.means.copy(),
                           level=self.context.level)

    def conditional_moments(self, panel: PanelSeries) -> Tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        mean = np.repeat(self.means[:, None], panel.T, axis=1)
        return mean, mean.copy()

    def to_dict(self) -> Dict:
        return {"schools": dict(zip(self.school_ids, self.means.tolist()))}


class IngarchModel(CountModel):
    """Per-school Poisson INGARCH(1,1) with plug-in Poisson intervals."""

    def fit(self, panel: PanelSeries) -> "IngarchModel":
        workers = self.context.workers
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                self.fits: List[IngarchFit] = list(pool.map(fit_ingarch11, panel.counts))
        else:
            self.fits = [fit_ingarch11(y) for y in panel.counts]
        n_fallback = sum(f.fallback for f in self.fits)
        if n_fallback:
            logger.warning(f"{self.name}: {n_fallback} school(s) fell back to the intercept model")
        self.school_ids = panel.school_ids
        self.fitted = True
        return self

    def forecast(self, origin: ForecastOrigin, rng: np.random.Generator) -> ForecastSet:
        self._check_fitted()
        lam = np.array([f.next_mean() for f in self.fits])
        lower, upper = poisson_intervals(lam, self.context.level)
        return ForecastSet(self.name, origin.year, origin.history.school_ids, lam, lower, upper,
                           level=self.context.level)

    def conditional_moments(self, panel: PanelSeries) -> Tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        lam = np.stack([ingarch_intensity(y, f.beta0, f.alpha1, f.beta1)
                        for y, f in zip(panel.counts.astype(float), self.fits)])
        return lam, lam.copy()

    def to_dict(self) -> Dict:
        return {"schools": {sid: f.to_dict() for sid, f in zip(self.school_ids, self.fits)}}


class _PenalizedModel(CountModel):
    """Reservoir and penalty, cross-validated on request."""
    cv: Optional[CVResult] = None

    def _select(self, panel: PanelSeries) -> Tuple[ReservoirSpec, float]:
        spec = self._reservoir_spec(panel)
        if not self.config.cross_validate:
            return spec, self.config.tau
        self.cv = select_hyperparameters(
            panel, self.config.reservoir_grid.candidates(spec), self.config.tau_grid,
            self.config.cv_years, self.context.workers, self.config.tol, self.config.max_iter,
        )
        return self.cv.spec, self.cv.tau

    def _cv_dict(self) -> Dict:
        return {"cv": self.cv.rows} if self.cv is not None else {}


class SinglePoissonESN(_PenalizedModel):
    """One reservoir, LASSO-penalized Poisson fit per school, plug-in Poisson intervals."""

    def fit(self, panel: PanelSeries) -> "SinglePoissonESN":
        spec, tau = self._select(panel)
        self.tau = tau
        self.esn: SingleESNFit = fit_single_esn(panel, spec, tau, self.context.workers,
                                                self.config.tol, self.config.max_iter)
        self.school_ids = panel.school_ids
        self.fitted = True
        return self

    def forecast(self, origin: ForecastOrigin, rng: np.random.Generator) -> ForecastSet:
        self._check_fitted()
        mean = self.esn.forecast_means(origin.history, origin.x_next)
        lower, upper = poisson_intervals(mean, self.context.level)
        return ForecastSet(self.name, origin.year, origin.history.school_ids, mean, lower, upper,
                           level=self.context.level)

    def conditional_moments(self, panel: PanelSeries) -> Tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        mean = self.esn.fitted_means(run_states(panel, self.esn.weights, self.esn.nu))
        return mean, mean.copy()

    def to_dict(self) -> Dict:
        return {"tau": self.tau, **self.esn.to_dict(), **self._cv_dict()}

    def save(self, directory: str) -> List[str]:
        files = super().save(directory)
        self.esn.weights.save(os.path.join(directory, "reservoir.npz"))
        return files + ["reservoir.npz"]


class EnsemblePoissonESN(_PenalizedModel):
    """M single ESNs on distinct reservoirs; intervals from pooled Poisson draws."""

    def fit(self, panel: PanelSeries) -> "EnsemblePoissonESN":
        spec, tau = self._select(panel)
        self.tau = tau
        self.ensemble: EnsembleFit = fit_ensemble_esn(
            panel, spec, tau, self.config.ensemble_size, self.context.reservoir_seed,
            self.context.workers, self.config.tol, self.config.max_iter,
        )
        self.fitted = True
        return self

    def forecast(self, origin: ForecastOrigin, rng: np.random.Generator) -> ForecastSet:
        self._check_fitted()
        member_means = self.ensemble.forecast_means(origin.history, origin.x_next)
        point, lower, upper, samples = ensemble_predictive(
            member_means, self.config.ensemble_draws, rng, self.context.level
        )
        return ForecastSet(self.name, origin.year, origin.history.school_ids, point, lower, upper,
                           samples=samples, level=self.context.level)

    def conditional_moments(self, panel: PanelSeries) -> Tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        mean = self.ensemble.fitted_means(panel)
        return mean, mean.copy()

    def to_dict(self) -> Dict:
        return {"tau": self.tau, **self.ensemble.to_dict(), **self._cv_dict()}


class _BayesianModel(CountModel):
    """Shared predictive-sample forecasting for the Bayesian ESNs."""

    def forecast(self, origin: ForecastOrigin, rng: np.random.Generator) -> ForecastSet:
        self._check_fitted()
        samples = self.result.predictive(origin.history, origin.x_next, self.config.n_pred_samples, rng)
        lower, upper = _interval_from_samples(samples, self.context.level)
        return ForecastSet(self.name, origin.year, origin.history.school_ids, samples.mean(axis=1),
                           lower, upper, samples=samples, level=self.context.level)

    def save(self, directory: str) -> List[str]:
        files = super().save(directory)
        self.result.weights.save(os.path.join(directory, "reservoir.npz"))
        self._draws().save(os.path.join(directory, "chain.npz"))
        return files + ["reservoir.npz", "chain.npz"]

    def _draws(self):
        """Object holding the posterior draws written to chain.npz."""
        return self.result.chain


class BayesPoissonESN(_BayesianModel):
    """Per-school conjugate MLG posterior with a fixed prior scale."""

    def fit(self, panel: PanelSeries) -> "BayesPoissonESN":
        start = time.time()
        weights = gen_weights(self._reservoir_spec(panel))
        n_draws = (self.config.n_iter - self.config.burn_in) // self.config.thin
        self.result: BayesPoissonESNFit = fit_bayes_poisson_panel(
            panel, weights, n_draws, self._chain_rng(panel), self.config.sigma_eta,
            self.context.mlg.alpha, self.context.mlg.zero_count_shape,
        )
        logger.info(f"{self.name}: {n_draws} posterior draws for {panel.N} schools "
                    f"in {time.time() - start:.1f}s")
        self.fitted = True
        return self

    def conditional_moments(self, panel: PanelSeries) -> Tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        mean = self.result.fitted_means(run_states(panel, self.result.weights, self.result.nu))
        return mean, mean.copy()

    def to_dict(self) -> Dict:
        draws = np.stack([p.draws for p in self.result.posteriors])
        return {
            "sigma_eta": self.config.sigma_eta,
            "n_draws": int(draws.shape[1]),
            "posterior_mean": draws.mean(axis=1).tolist(),
        }

    def _draws(self):
        return self.result


class HierPoissonESN(_BayesianModel):
    """State-pooled Poisson ESN sampled by conditional MLG Gibbs."""

    def fit(self, panel: PanelSeries) -> "HierPoissonESN":
        spec = self._reservoir_spec(panel)
        weights = gen_weights(spec)
        states = run_states(panel, weights, spec.nu)
        cfg = self.config
        chain = fit_hier_poisson(
            panel, states, cfg.n_iter, self._chain_rng(panel), burn_in=cfg.burn_in, thin=cfg.thin,
            alpha=self.context.mlg.alpha, upsilon=cfg.upsilon, sigma_init=cfg.sigma_init,
            step_cap=cfg.sigma_step_cap, zero_count_shape=self.context.mlg.zero_count_shape,
            log_every=cfg.log_every,
        )
        self.result = HierPoissonESNFit(weights, chain, panel.state_of, spec.nu)
        self.fitted = True
        return self

    def conditional_moments(self, panel: PanelSeries) -> Tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        mean = self.result.fitted_means(panel, run_states(panel, self.result.weights, self.result.nu))
        return mean, mean.copy()

    def to_dict(self) -> Dict:
        chain = self.result.chain
        return {
            "n_iter": chain.n_iter,
            "burn_in": chain.burn_in,
            "thin": chain.thin,
            "n_saved": chain.n_saved,
            "accept_rates": chain.accept_rates,
            "sigma_eta_mean": float(chain.sigma_eta_chain.mean()),
            "sigma_delta_mean": float(chain.sigma_delta_chain.mean()),
        }


class HierNBESN(_BayesianModel):
    """State-pooled negative binomial ESN sampled with Polya-Gamma augmentation."""

    def fit(self, panel: PanelSeries) -> "HierNBESN":
        spec = self._reservoir_spec(panel)
        weights = gen_weights(spec)
        states = run_states(panel, weights, spec.nu)
        cfg = self.config
        settings = NBSamplerSettings(
            ig_shape=cfg.ig_shape, ig_rate=cfg.ig_rate, r_step_cap=cfg.r_step_cap,
            pg_method=self.context.polya_gamma.method,
            pg_truncation=self.context.polya_gamma.truncation,
        )
        chain = fit_hier_nb(
            panel, states, cfg.n_iter, self._chain_rng(panel), burn_in=cfg.burn_in, thin=cfg.thin,
            settings=settings, variance_init=cfg.variance_init, r_init=cfg.r_init,
            log_every=cfg.log_every,
        )
        self.result = HierNBESNFit(weights, chain, panel.state_of, spec.nu)
        self.school_ids = panel.school_ids
        self.fitted = True
        return self

    def conditional_moments(self, panel: PanelSeries) -> Tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        return self.result.fitted_moments(panel, run_states(panel, self.result.weights, self.result.nu))

    def to_dict(self) -> Dict:
        chain = self.result.chain
        return {
            "n_iter": chain.n_iter,
            "burn_in": chain.burn_in,
            "thin": chain.thin,
            "n_saved": chain.n_saved,
            "r_median": dict(zip(self.school_ids, np.median(chain.r_draws, axis=0).tolist())),
            "r_accept": dict(zip(self.school_ids, chain.r_accept.tolist())),
            "sigma_eta2_mean": float(chain.sigma_eta2_chain.mean()),
            "sigma_delta2_mean": float(chain.sigma_delta2_chain.mean()),
        }


MODEL_CLASSES = {
    "intercept": InterceptModel,
    "ingarch11": IngarchModel,
    "single-poisson-esn": SinglePoissonESN,
    "ensemble-poisson-esn": EnsemblePoissonESN,
    "bayes-poisson-esn": BayesPoissonESN,
    "hier-poisson-esn": HierPoissonESN,
    "hier-nb-esn": HierNBESN,
}


def create_model(config: ModelConfig, context: Optional[ModelContext] = None) -> CountModel:
    """Factory function to create the model for a configured name."""
    try:
        cls = MODEL_CLASSES[config.name]
    except KeyError:
        raise ValueError(f"Unknown model: {config.name}")
    return cls(config, context or ModelContext())
