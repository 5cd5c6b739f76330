"""Synthetic panel generators (data generating processes)."""
from typing import Dict, Optional, Tuple
from abc import ABC, abstractmethod
import logging

import numpy as np
from scipy.special import expit

from src.cardinality import generate_school_space
from src.config import DGP_NAMES, ReservoirSpec
from src.panel_data import PanelSeries, default_covariates, intercept_covariates
from src.rand_dists import MLGParams, sample_mlg
from src.reservoir import advance, gen_weights, initial_state

logger = logging.getLogger(__name__)

# Linear predictors are clipped here before exponentiation
PSI_CLIP = 40.0


class PanelGenerator(ABC):
    """Base class for panel generators."""

    def __init__(
        self,
        name: str,
        n_states: int,
        schools_per_state: int,
        T: int,
        seed: int,
        start_year: int = 1972,
    ):
        if n_states < 1 or schools_per_state < 1 or T < 1:
            raise ValueError(
                f"Panel dimensions must be positive (n_states={n_states}, "
                f"schools_per_state={schools_per_state}, T={T})"
            )
        self.name = name
        self.n_states = n_states
        self.schools_per_state = schools_per_state
        self.T = T
        self.start_year = start_year
        self.seed = seed

        # Initialize RNG with deterministic seed
        self.rng = np.random.default_rng(seed)

        school_ids, state_of, state_labels = generate_school_space(n_states, schools_per_state)
        self.school_ids = school_ids
        self.state_of = np.asarray(state_of)
        self.state_labels = state_labels

    @property
    def N(self) -> int:
        return self.n_states * self.schools_per_state

    def _template(self) -> PanelSeries:
        """Zero-count panel carrying ids, years and covariates."""
        years = np.arange(self.start_year, self.start_year + self.T)
        panel = PanelSeries(
            counts=np.zeros((self.N, self.T), dtype=np.int64),
            school_ids=tuple(self.school_ids),
            state_of=self.state_of,
            state_labels=tuple(self.state_labels),
            years=years,
            covariates=np.ones((self.N, self.T, 1)),
        )
        return default_covariates(panel) if self.T >= 2 else intercept_covariates(panel)

    def _with_counts(self, template: PanelSeries, counts: np.ndarray) -> PanelSeries:
        return PanelSeries(counts, template.school_ids, template.state_of,
                           template.state_labels, template.years, template.covariates)

    @abstractmethod
    def generate(self) -> Tuple[PanelSeries, dict]:
        """Simulate a panel and return it with its ground-truth parameters."""
        pass


class IIDPoissonGenerator(PanelGenerator):
    """Independent Poisson counts with a common mean."""

    def __init__(self, *args, mean: float = 5.0, **kwargs):
        super().__init__("iid-poisson", *args, **kwargs)
        if mean <= 0:
            raise ValueError(f"iid-poisson mean must be positive, got {mean}")
        self.mean = mean

    def generate(self) -> Tuple[PanelSeries, dict]:
        template = self._template()
        counts = self.rng.poisson(self.mean, size=(self.N, self.T))
        return self._with_counts(template, counts), {"dgp": self.name, "mean": self.mean}


class IngarchGenerator(PanelGenerator):
    """Poisson INGARCH(1,1): lambda_t = beta0 + alpha1 lambda_{t-1} + beta1 y_{t-1}."""

    def __init__(self, *args, beta0: float = 5.0, alpha1: float = 0.3, beta1: float = 0.4, **kwargs):
        super().__init__("ingarch", *args, **kwargs)
        if beta0 <= 0 or alpha1 < 0 or beta1 < 0 or alpha1 + beta1 >= 1:
            raise ValueError("ingarch needs beta0 > 0, alpha1, beta1 >= 0 and alpha1 + beta1 < 1")
        self.beta0 = beta0
        self.alpha1 = alpha1
        self.beta1 = beta1

    def generate(self) -> Tuple[PanelSeries, dict]:
        template = self._template()
        counts = np.zeros((self.N, self.T), dtype=np.int64)
        lam = np.full(self.N, self.beta0 / (1.0 - self.alpha1 - self.beta1))
        for t in range(self.T):
            if t > 0:
                lam = self.beta0 + self.alpha1 * lam + self.beta1 * counts[:, t - 1]
            counts[:, t] = self.rng.poisson(lam)
        truth = {"dgp": self.name, "beta0": self.beta0, "alpha1": self.alpha1, "beta1": self.beta1}
        return self._with_counts(template, counts), truth


class HierarchicalESNGenerator(PanelGenerator):
    """Counts rolled forward through a fixed reservoir with state-level coefficients."""

    def __init__(
        self,
        name: str,
        *args,
        reservoir: Optional[ReservoirSpec] = None,
        sigma_eta: float = 2.0,
        sigma_delta: float = 0.5,
        mean_level: float = 30.0,
        **kwargs,
    ):
        super().__init__(name, *args, **kwargs)
        self.reservoir_spec = reservoir or ReservoirSpec()
        self.sigma_eta = sigma_eta
        self.sigma_delta = sigma_delta
        self.mean_level = mean_level

    @abstractmethod
    def _draw_coefficients(self, n_h: int) -> Tuple[np.ndarray, np.ndarray]:
        """State coefficient blocks (n_states, n_h) and state offsets (n_states,)."""
        pass

    @abstractmethod
    def _draw_counts(self, psi: np.ndarray) -> np.ndarray:
        pass

    def _extra_truth(self) -> Dict:
        return {}

    def generate(self) -> Tuple[PanelSeries, dict]:
        template = self._template()
        spec = self.reservoir_spec.model_copy(update={"r": template.r})
        weights = gen_weights(spec)
        eta, delta = self._draw_coefficients(spec.n_h)

        counts = np.zeros((self.N, self.T), dtype=np.int64)
        eta_i = eta[self.state_of]
        delta_i = delta[self.state_of]
        h = initial_state(template.covariates[:, 0], weights)
        for t in range(self.T):
            if t > 0:
                h = advance(h, counts[:, t - 1], template.covariates[:, t], weights, spec.nu)
            psi = np.clip(np.sum(h * eta_i, axis=1) + delta_i, -PSI_CLIP, PSI_CLIP)
            counts[:, t] = self._draw_counts(psi)

        truth = {
            "dgp": self.name,
            "eta": eta,
            "delta": delta,
            # merged-design ordering: eta blocks by state, then deltas
            "eta_tilde": np.concatenate([eta.reshape(-1), delta]),
            "sigma_eta": self.sigma_eta,
            "sigma_delta": self.sigma_delta,
            "reservoir": spec.model_dump(),
            **self._extra_truth(),
        }
        logger.info(f"Simulated {self.name} panel: N={self.N}, T={self.T}, "
                    f"mean count {counts.mean():.2f}")
        return self._with_counts(template, counts), truth


class HierPoissonESNGenerator(HierarchicalESNGenerator):
    """Poisson counts; coefficients from the multivariate log-gamma priors."""

    def __init__(self, *args, mlg_alpha: float = 1000.0, **kwargs):
        super().__init__("hier-poisson-esn", *args, **kwargs)
        self.mlg_alpha = mlg_alpha

    def _mlg_block(self, m: int, sigma: float) -> np.ndarray:
        if sigma == 0.0:
            return np.zeros(m)
        a = self.mlg_alpha
        prior = MLGParams(np.zeros(m), np.sqrt(a) * sigma * np.eye(m), a, a)
        return sample_mlg(prior, 1, self.rng)[0]

    def _draw_coefficients(self, n_h: int) -> Tuple[np.ndarray, np.ndarray]:
        eta = self._mlg_block(self.n_states * n_h, self.sigma_eta).reshape(self.n_states, n_h)
        delta = np.log(self.mean_level) + self._mlg_block(self.n_states, self.sigma_delta)
        return eta, delta

    def _draw_counts(self, psi: np.ndarray) -> np.ndarray:
        return self.rng.poisson(np.exp(psi))


class HierNBESNGenerator(HierarchicalESNGenerator):
    """Negative binomial counts with mean r e^psi and a common dispersion r."""

    def __init__(self, *args, dispersion: float = 2.0, **kwargs):
        super().__init__("hier-nb-esn", *args, **kwargs)
        if dispersion <= 0:
            raise ValueError(f"dispersion must be positive, got {dispersion}")
        self.dispersion = dispersion

    def _draw_coefficients(self, n_h: int) -> Tuple[np.ndarray, np.ndarray]:
        eta = self.rng.normal(0.0, self.sigma_eta, size=(self.n_states, n_h))
        delta = np.log(self.mean_level / self.dispersion) + self.rng.normal(
            0.0, self.sigma_delta, size=self.n_states
        )
        return eta, delta

    def _draw_counts(self, psi: np.ndarray) -> np.ndarray:
        return self.rng.negative_binomial(self.dispersion, expit(-psi))

    def _extra_truth(self) -> Dict:
        return {"r": np.full(self.N, self.dispersion)}


def create_generator(
    dgp: str,
    n_states: int,
    schools_per_state: int,
    T: int,
    seed: int,
    **params,
) -> PanelGenerator:
    """Factory function to create the generator for a named process."""
    dims = dict(n_states=n_states, schools_per_state=schools_per_state, T=T, seed=seed,
                start_year=params.pop("start_year", 1972))

    if dgp == "iid-poisson":
        return IIDPoissonGenerator(mean=params.get("mean", 5.0), **dims)
    elif dgp == "ingarch":
        return IngarchGenerator(
            beta0=params.get("beta0", 5.0),
            alpha1=params.get("alpha1", 0.3),
            beta1=params.get("beta1", 0.4),
            **dims,
        )
    elif dgp in ("hier-poisson-esn", "hier-nb-esn"):
        common = dict(
            reservoir=params.get("reservoir"),
            sigma_eta=params.get("sigma_eta", 2.0),
            sigma_delta=params.get("sigma_delta", 0.5),
            mean_level=params.get("mean_level", 30.0),
        )
        if dgp == "hier-poisson-esn":
            return HierPoissonESNGenerator(mlg_alpha=params.get("mlg_alpha", 1000.0), **common, **dims)
        return HierNBESNGenerator(dispersion=params.get("dispersion", 2.0), **common, **dims)
    else:
        raise ValueError(f"Unknown dgp '{dgp}'; expected one of {list(DGP_NAMES)}")
