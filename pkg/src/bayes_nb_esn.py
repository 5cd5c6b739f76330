"""Hierarchical negative binomial ESN sampled with Polya-Gamma augmentation."""
from dataclasses import dataclass
from typing import List, Optional, Tuple
import logging
import time

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln

from src.bayes_poisson_esn import PSI_CLIP, posterior_draw_indices
from src.errors import NumericalError
from src.panel_data import PanelSeries
from src.rand_dists import sample_inv_gamma, sample_pg
from src.reservoir import ReservoirWeights, advance, merged_design, run_states, state_block_columns

logger = logging.getLogger(__name__)

JITTER = 1e-10


def nb_logpmf(y, psi, r) -> np.ndarray:
    """Elementwise log pmf of p^y (1-p)^r with logit(p) = psi; mean r e^psi."""
    y = np.asarray(y, dtype=float)
    psi = np.asarray(psi, dtype=float)
    return (gammaln(y + r) - gammaln(r) - gammaln(y + 1.0)
            + y * psi - (y + r) * np.logaddexp(0.0, psi))


def nb_loglik_school(y, psi, r: float) -> float:
    if r <= 0:
        raise ValueError(f"dispersion r must be positive, got {r}")
    return float(np.sum(nb_logpmf(y, psi, r)))


def log_prior_r(r: np.ndarray) -> np.ndarray:
    """Half-Cauchy(0, 1) on 1/r, expressed as a density on r."""
    r = np.asarray(r, dtype=float)
    return -np.log1p(r ** -2.0) - 2.0 * np.log(r)


@dataclass
class NBState:
    """Current state of the sampler."""
    eta_tilde: np.ndarray
    sigma_eta2: float
    sigma_delta2: float
    r: np.ndarray
    omega: np.ndarray
    r_accepted: np.ndarray


@dataclass
class NBSamplerSettings:
    ig_shape: float = 0.001
    ig_rate: float = 0.001
    r_step_cap: float = 10.0
    pg_method: str = "polyagamma"
    pg_truncation: int = 200


class NBDesign:
    """Merged design plus per-state dense blocks (rows of the state's schools, its eta and delta columns)."""

    def __init__(self, panel: PanelSeries, states: np.ndarray):
        self.n_h = states.shape[2]
        self.n_states = panel.n_states
        self.N, self.T = panel.N, panel.T
        self.H_tilde = merged_design(states, panel)
        self.y = panel.counts.astype(float)
        self.blocks: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        for s in range(self.n_states):
            schools = np.flatnonzero(panel.state_of == s)
            rows = (schools[:, None] * self.T + np.arange(self.T)[None, :]).reshape(-1)
            X = np.concatenate(
                [states[schools].reshape(-1, self.n_h), np.ones((rows.size, 1))], axis=1
            )
            cols = state_block_columns(s, self.n_h, self.n_states)
            self.blocks.append((rows, cols, X))

    @property
    def width(self) -> int:
        return self.H_tilde.shape[1]

    def linear_predictor(self, eta_tilde: np.ndarray) -> np.ndarray:
        return (self.H_tilde @ eta_tilde).reshape(self.N, self.T)


def _draw_gaussian_block(P: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(P^{-1} b, P^{-1}) through a Cholesky factor of the precision."""
    try:
        C = linalg.cholesky(P, lower=True)
    except linalg.LinAlgError:
        logger.warning("Precision block not positive definite; retrying with jitter")
        try:
            C = linalg.cholesky(P + JITTER * np.eye(P.shape[0]), lower=True)
        except linalg.LinAlgError as e:
            raise NumericalError(f"Cholesky factorization of the coefficient precision failed: {e}")
    mean = linalg.cho_solve((C, True), b)
    z = rng.standard_normal(P.shape[0])
    return mean + linalg.solve_triangular(C.T, z, lower=False)


def draw_eta_tilde_nb(
    design: NBDesign,
    omega: np.ndarray,
    r: np.ndarray,
    sigma_eta2: float,
    sigma_delta2: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian full conditional of the coefficients, one state block at a time."""
    kappa = ((design.y - r[:, None]) / 2.0).reshape(-1)
    w = omega.reshape(-1)
    prior_prec = np.append(np.full(design.n_h, 1.0 / sigma_eta2), 1.0 / sigma_delta2)
    eta_tilde = np.empty(design.width)
    for rows, cols, X in design.blocks:
        P = (X * w[rows, None]).T @ X + np.diag(prior_prec)
        b = X.T @ kappa[rows]
        eta_tilde[cols] = _draw_gaussian_block(P, b, rng)
    return eta_tilde


def update_r(
    r: np.ndarray,
    y: np.ndarray,
    psi: np.ndarray,
    cap: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized Metropolis-Hastings for every school's dispersion.

    Uniform proposal with half-width min(cap, r); non-positive proposals are
    rejected and the Hastings term log m(r) - log m(r') is included.
    """
    m_cur = np.minimum(cap, r)
    prop = r + rng.uniform(-m_cur, m_cur)
    m_prop = np.minimum(cap, np.where(prop > 0, prop, 1.0))
    feasible = (prop > 0) & (np.abs(prop - r) <= m_prop)
    safe = np.where(feasible, prop, r)

    lp_cur = np.sum(nb_logpmf(y, psi, r[:, None]), axis=1) + log_prior_r(r)
    lp_prop = np.sum(nb_logpmf(y, psi, safe[:, None]), axis=1) + log_prior_r(safe)
    log_ratio = lp_prop - lp_cur + np.log(m_cur) - np.log(m_prop)
    if np.any(np.isnan(log_ratio[feasible])):
        raise NumericalError("NaN in dispersion acceptance ratio")
    accept = feasible & (np.log(rng.random(r.shape)) < log_ratio)
    return np.where(accept, prop, r), accept


def gibbs_sweep_nb(
    state: NBState,
    design: NBDesign,
    rng: np.random.Generator,
    settings: Optional[NBSamplerSettings] = None,
) -> NBState:
    """omega | r, eta; eta_tilde | omega; sigma^2 | eta_tilde; r_i | eta_tilde."""
    settings = settings or NBSamplerSettings()
    psi = design.linear_predictor(state.eta_tilde)

    omega = sample_pg(design.y + state.r[:, None], psi, rng,
                      method=settings.pg_method, truncation=settings.pg_truncation)
    omega = np.asarray(omega, dtype=float).reshape(design.N, design.T)

    eta_tilde = draw_eta_tilde_nb(design, omega, state.r, state.sigma_eta2, state.sigma_delta2, rng)

    n_eta = design.n_h * design.n_states
    eta_block, delta_block = eta_tilde[:n_eta], eta_tilde[n_eta:]
    sigma_eta2 = float(sample_inv_gamma(settings.ig_shape + eta_block.size / 2.0,
                                        settings.ig_rate + eta_block @ eta_block / 2.0, rng))
    sigma_delta2 = float(sample_inv_gamma(settings.ig_shape + delta_block.size / 2.0,
                                          settings.ig_rate + delta_block @ delta_block / 2.0, rng))

    psi = design.linear_predictor(eta_tilde)
    r, accepted = update_r(state.r, design.y, psi, settings.r_step_cap, rng)

    return NBState(eta_tilde, sigma_eta2, sigma_delta2, r, omega, state.r_accepted + accepted)


@dataclass
class NBChain:
    """Saved draws of the negative binomial Gibbs sampler."""
    eta_tilde_draws: np.ndarray
    sigma_eta2_chain: np.ndarray
    sigma_delta2_chain: np.ndarray
    r_draws: np.ndarray
    omega: np.ndarray
    r_accept: np.ndarray
    n_h: int
    n_states: int
    burn_in: int
    thin: int
    n_iter: int

    @property
    def n_saved(self) -> int:
        return self.eta_tilde_draws.shape[0]

    def eta_blocks(self) -> np.ndarray:
        return self.eta_tilde_draws[:, : self.n_h * self.n_states].reshape(
            self.n_saved, self.n_states, self.n_h
        )

    def deltas(self) -> np.ndarray:
        return self.eta_tilde_draws[:, self.n_h * self.n_states:]

    def posterior_mean(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.eta_tilde_draws.mean(axis=0), self.r_draws.mean(axis=0)

    def save(self, path: str) -> None:
        np.savez(
            path,
            eta_tilde=self.eta_tilde_draws,
            sigma_eta2=self.sigma_eta2_chain,
            sigma_delta2=self.sigma_delta2_chain,
            r=self.r_draws,
            omega=self.omega,
            r_accept=self.r_accept,
            n_h=np.array(self.n_h),
            n_states=np.array(self.n_states),
            burn_in=np.array(self.burn_in),
            thin=np.array(self.thin),
            n_iter=np.array(self.n_iter),
        )


def fit_hier_nb(
    panel: PanelSeries,
    states: np.ndarray,
    n_iter: int,
    rng: np.random.Generator,
    burn_in: int = 1000,
    thin: int = 2,
    settings: Optional[NBSamplerSettings] = None,
    variance_init: float = 1.0,
    r_init: float = 10.0,
    log_every: int = 500,
) -> NBChain:
    """Run the sweep n_iter times and keep every thin-th state after burn-in."""
    if n_iter <= burn_in:
        raise ValueError(f"n_iter ({n_iter}) must exceed burn_in ({burn_in})")
    if thin < 1:
        raise ValueError(f"thin must be >= 1, got {thin}")
    settings = settings or NBSamplerSettings()

    design = NBDesign(panel, states)
    state = NBState(
        eta_tilde=np.zeros(design.width),
        sigma_eta2=variance_init,
        sigma_delta2=variance_init,
        r=np.full(panel.N, float(r_init)),
        omega=np.ones((panel.N, panel.T)),
        r_accepted=np.zeros(panel.N, dtype=np.int64),
    )

    n_saved = (n_iter - burn_in) // thin
    saved = np.empty((n_saved, design.width))
    se2 = np.empty(n_saved)
    sd2 = np.empty(n_saved)
    r_draws = np.empty((n_saved, panel.N))

    start = time.time()
    k = 0
    for it in range(1, n_iter + 1):
        state = gibbs_sweep_nb(state, design, rng, settings)
        if not np.all(np.isfinite(state.eta_tilde)):
            raise NumericalError(f"non-finite coefficient draw at iteration {it}")

        if it > burn_in and (it - burn_in) % thin == 0 and k < n_saved:
            saved[k] = state.eta_tilde
            se2[k] = state.sigma_eta2
            sd2[k] = state.sigma_delta2
            r_draws[k] = state.r
            k += 1

        if it % log_every == 0:
            logger.info(
                f"hier-nb sweep {it}/{n_iter}: median r={np.median(state.r):.3g}, "
                f"sigma_eta2={state.sigma_eta2:.3g}, sigma_delta2={state.sigma_delta2:.3g}, "
                f"mean r acceptance {state.r_accepted.mean() / it:.2f}"
            )

    r_accept = state.r_accepted / n_iter
    logger.info(f"hier-nb chain: {n_iter} sweeps in {time.time() - start:.1f}s, {n_saved} saved, "
                f"r acceptance in [{r_accept.min():.2f}, {r_accept.max():.2f}]")
    return NBChain(saved, se2, sd2, r_draws, state.omega, r_accept,
                   design.n_h, design.n_states, burn_in, thin, n_iter)


@dataclass
class HierNBESNFit:
    """Shared reservoir plus a hierarchical NB chain."""
    weights: ReservoirWeights
    chain: NBChain
    state_of: np.ndarray
    nu: float = 0.9

    def fitted_moments(self, panel: PanelSeries, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Plug-in conditional mean r e^psi and variance r e^psi (1 + e^psi)."""
        eta_bar, r_bar = self.chain.posterior_mean()
        psi = np.clip((merged_design(states, panel) @ eta_bar).reshape(panel.N, panel.T),
                      -PSI_CLIP, PSI_CLIP)
        mean = r_bar[:, None] * np.exp(psi)
        return mean, mean * (1.0 + np.exp(psi))

    def predictive(self, history: PanelSeries, x_next: np.ndarray, n_samples: int,
                   rng: np.random.Generator) -> np.ndarray:
        states = run_states(history, self.weights, self.nu)
        h_next = advance(states[:, -1], history.counts[:, -1], x_next, self.weights, self.nu)
        idx = posterior_draw_indices(self.chain.n_saved, n_samples, rng)
        eta = self.chain.eta_blocks()[idx][:, self.state_of]
        delta = self.chain.deltas()[idx][:, self.state_of]
        psi = np.clip(np.einsum("sin,in->si", eta, h_next) + delta, -PSI_CLIP, PSI_CLIP)
        r = self.chain.r_draws[idx]
        return rng.negative_binomial(r, expit(-psi)).T
