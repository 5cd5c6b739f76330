"""Conjugate Bayesian Poisson ESNs: per-school cMLG posteriors and the hierarchical Gibbs sampler."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional
import logging
import time

import numpy as np
from scipy import sparse

from src.errors import NumericalError
from src.panel_data import PanelSeries
from src.rand_dists import CMLGParams, sample_cmlg
from src.reservoir import ReservoirWeights, advance, merged_design, run_states

logger = logging.getLogger(__name__)

PSI_CLIP = 40.0


def count_shapes(y: np.ndarray, zero_count_shape: float) -> np.ndarray:
    """Log-gamma shapes for data rows: the count itself, or a small constant for zeros."""
    y = np.asarray(y, dtype=float)
    return np.where(y > 0, y, zero_count_shape)


def posterior_draw_indices(n_saved: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Saved draws used for predictive sampling: every draw in order, or uniform with replacement."""
    if n_saved == n_samples:
        return np.arange(n_saved)
    return rng.integers(0, n_saved, size=n_samples)


# ---------------------------------------------------------------------------
# Per-school conjugate model


@dataclass
class PoissonPosterior:
    """Independent posterior draws of one school's coefficients."""
    draws: np.ndarray
    sigma_eta: float = 0.1

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]


def school_cmlg_params(
    H: np.ndarray,
    y: np.ndarray,
    sigma_eta: float,
    alpha: float,
    zero_count_shape: float = 0.5,
) -> CMLGParams:
    """L = [H; alpha^(-1/2)/sigma_eta I], xi = (y, alpha 1), psi = (1, alpha 1)."""
    H = np.asarray(H, dtype=float).reshape(-1, np.shape(H)[-1])
    n_h = H.shape[1]
    c = alpha ** -0.5 / sigma_eta
    L = np.vstack([H, c * np.eye(n_h)])
    xi = np.concatenate([count_shapes(y, zero_count_shape), np.full(n_h, alpha)])
    psi = np.concatenate([np.ones(H.shape[0]), np.full(n_h, alpha)])
    return CMLGParams(L, xi, psi)


def fit_bayes_poisson_school(
    H: np.ndarray,
    y: np.ndarray,
    n_draws: int,
    rng: np.random.Generator,
    sigma_eta: float = 0.1,
    alpha: float = 1000.0,
    zero_count_shape: float = 0.5,
) -> PoissonPosterior:
    """Direct i.i.d. draws from the conditional MLG posterior (no burn-in or thinning)."""
    if n_draws < 1:
        raise ValueError(f"n_draws must be >= 1, got {n_draws}")
    params = school_cmlg_params(H, y, sigma_eta, alpha, zero_count_shape)
    draws = sample_cmlg(params, rng, n_draws=n_draws)
    if not np.all(np.isfinite(draws)):
        raise NumericalError("conditional MLG posterior produced non-finite draws")
    return PoissonPosterior(draws, sigma_eta)


@dataclass
class BayesPoissonESNFit:
    """One shared reservoir and an independent posterior per school."""
    weights: ReservoirWeights
    posteriors: List[PoissonPosterior]
    nu: float

    def posterior_mean(self) -> np.ndarray:
        return np.stack([p.draws.mean(axis=0) for p in self.posteriors])

    def fitted_means(self, states: np.ndarray) -> np.ndarray:
        return np.exp(np.einsum("itn,in->it", states, self.posterior_mean()))

    def predictive(self, history: PanelSeries, x_next: np.ndarray, n_samples: int,
                   rng: np.random.Generator) -> np.ndarray:
        """(N, n_samples) predictive counts for the year after the history."""
        states = run_states(history, self.weights, self.nu)
        h_next = advance(states[:, -1], history.counts[:, -1], x_next, self.weights, self.nu)
        samples = np.empty((history.N, n_samples), dtype=np.int64)
        for i, post in enumerate(self.posteriors):
            idx = posterior_draw_indices(post.n_draws, n_samples, rng)
            psi = np.clip(post.draws[idx] @ h_next[i], -PSI_CLIP, PSI_CLIP)
            samples[i] = rng.poisson(np.exp(psi))
        return samples

    def save(self, path: str) -> None:
        np.savez(path, draws=np.stack([p.draws for p in self.posteriors]),
                 sigma_eta=np.array(self.posteriors[0].sigma_eta if self.posteriors else np.nan))


def fit_bayes_poisson_panel(
    panel: PanelSeries,
    weights: ReservoirWeights,
    n_draws: int,
    rng: np.random.Generator,
    sigma_eta: float = 0.1,
    alpha: float = 1000.0,
    zero_count_shape: float = 0.5,
) -> BayesPoissonESNFit:
    states = run_states(panel, weights, weights.spec.nu)
    posteriors = [
        fit_bayes_poisson_school(states[i], panel.counts[i], n_draws, rng,
                                 sigma_eta, alpha, zero_count_shape)
        for i in range(panel.N)
    ]
    return BayesPoissonESNFit(weights, posteriors, weights.spec.nu)


# ---------------------------------------------------------------------------
# Hierarchical model


def log_fc_sigma(sigma: float, block: np.ndarray, upsilon: float, alpha: float) -> float:
    """
    Log full conditional of a prior scale, up to a constant:
    -ln(1 + (sigma/upsilon)^2) - d ln sigma + alpha^(1/2)/sigma sum(block)
    - alpha sum(exp(block / (alpha^(1/2) sigma))).
    """
    if sigma <= 0:
        return -np.inf
    block = np.asarray(block, dtype=float)
    root = np.sqrt(alpha)
    with np.errstate(over="ignore"):
        return float(
            -np.log1p((sigma / upsilon) ** 2)
            - block.size * np.log(sigma)
            + root / sigma * block.sum()
            - alpha * np.exp(block / (root * sigma)).sum()
        )


# The two scale parameters share one full-conditional form
log_fc_sigma_eta = log_fc_sigma
log_fc_sigma_delta = log_fc_sigma


def mh_scale_step(
    current: float,
    log_target,
    cap: float,
    rng: np.random.Generator,
) -> tuple:
    """
    Uniform random-walk step on a positive scale with half-width min(cap, current).

    Non-positive proposals are rejected. The half-width depends on the current
    value, so the acceptance ratio carries log m(current) - log m(proposal) and
    the reverse move must be reachable.
    """
    m_cur = min(cap, current)
    proposal = current + rng.uniform(-m_cur, m_cur)
    if proposal <= 0:
        return current, False
    m_prop = min(cap, proposal)
    if abs(current - proposal) > m_prop:
        return current, False
    lp_prop = log_target(proposal)
    lp_cur = log_target(current)
    if np.isnan(lp_prop) or np.isnan(lp_cur):
        raise NumericalError(f"full conditional is NaN at scale {current} -> {proposal}")
    log_ratio = lp_prop - lp_cur + np.log(m_cur) - np.log(m_prop)
    if np.log(rng.random()) < log_ratio:
        return proposal, True
    return current, False


@dataclass
class HierPoissonChain:
    """Saved draws of the hierarchical Poisson Gibbs sampler."""
    eta_tilde_draws: np.ndarray
    sigma_eta_chain: np.ndarray
    sigma_delta_chain: np.ndarray
    accept_rates: Dict[str, float]
    n_h: int
    n_states: int
    burn_in: int
    thin: int
    n_iter: int

    @property
    def n_saved(self) -> int:
        return self.eta_tilde_draws.shape[0]

    def eta_blocks(self) -> np.ndarray:
        """(saved, n_states, n_h) state coefficient blocks."""
        return self.eta_tilde_draws[:, : self.n_h * self.n_states].reshape(
            self.n_saved, self.n_states, self.n_h
        )

    def deltas(self) -> np.ndarray:
        return self.eta_tilde_draws[:, self.n_h * self.n_states:]

    def posterior_mean(self) -> np.ndarray:
        return self.eta_tilde_draws.mean(axis=0)

    def save(self, path: str) -> None:
        np.savez(
            path,
            eta_tilde=self.eta_tilde_draws,
            sigma_eta=self.sigma_eta_chain,
            sigma_delta=self.sigma_delta_chain,
            accept_sigma_eta=np.array(self.accept_rates.get("sigma_eta", np.nan)),
            accept_sigma_delta=np.array(self.accept_rates.get("sigma_delta", np.nan)),
            n_h=np.array(self.n_h),
            n_states=np.array(self.n_states),
            burn_in=np.array(self.burn_in),
            thin=np.array(self.thin),
            n_iter=np.array(self.n_iter),
        )


def prior_scales(n_h: int, n_states: int, sigma_eta: float, sigma_delta: float, alpha: float) -> np.ndarray:
    """Diagonal of the prior block of L: alpha^(-1/2)/sigma per coordinate."""
    root = alpha ** -0.5
    return np.concatenate([np.full(n_h * n_states, root / sigma_eta), np.full(n_states, root / sigma_delta)])


def draw_eta_tilde(
    H_tilde: sparse.spmatrix,
    data_shapes: np.ndarray,
    n_h: int,
    n_states: int,
    sigma_eta: float,
    sigma_delta: float,
    alpha: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One conditional MLG draw of (eta_1, ..., eta_ns, delta) given the scales."""
    K = H_tilde.shape[1]
    L = sparse.vstack([H_tilde, sparse.diags(prior_scales(n_h, n_states, sigma_eta, sigma_delta, alpha))],
                      format="csc")
    xi = np.concatenate([data_shapes, np.full(K, alpha)])
    psi = np.concatenate([np.ones(H_tilde.shape[0]), np.full(K, alpha)])
    return sample_cmlg(CMLGParams(L, xi, psi), rng)


def fit_hier_poisson(
    panel: PanelSeries,
    states: np.ndarray,
    n_iter: int,
    rng: np.random.Generator,
    burn_in: int = 500,
    thin: int = 2,
    alpha: float = 1000.0,
    upsilon: float = 100.0,
    sigma_init: float = 0.5,
    step_cap: float = 0.5,
    zero_count_shape: float = 0.5,
    update_sigmas: bool = True,
    log_every: int = 500,
) -> HierPoissonChain:
    """
    Gibbs sampler: eta_tilde from its conditional MLG, then Metropolis-Hastings
    steps for sigma_eta and sigma_delta.
    """
    if n_iter <= burn_in:
        raise ValueError(f"n_iter ({n_iter}) must exceed burn_in ({burn_in})")
    if thin < 1:
        raise ValueError(f"thin must be >= 1, got {thin}")

    n_h = states.shape[2]
    n_s = panel.n_states
    H_tilde = merged_design(states, panel)
    shapes = count_shapes(panel.counts.reshape(-1), zero_count_shape)
    n_eta = n_h * n_s

    sigma_eta = sigma_delta = float(sigma_init)
    eta_tilde = np.zeros(H_tilde.shape[1])
    n_saved = (n_iter - burn_in) // thin
    saved = np.empty((n_saved, H_tilde.shape[1]))
    se_chain = np.empty(n_saved)
    sd_chain = np.empty(n_saved)
    accepted = {"sigma_eta": 0, "sigma_delta": 0}

    start = time.time()
    k = 0
    for it in range(1, n_iter + 1):
        eta_tilde = draw_eta_tilde(H_tilde, shapes, n_h, n_s, sigma_eta, sigma_delta, alpha, rng)
        if not np.all(np.isfinite(eta_tilde)):
            raise NumericalError(
                f"non-finite coefficient draw at iteration {it} "
                f"(sigma_eta={sigma_eta:.4g}, sigma_delta={sigma_delta:.4g})"
            )

        if update_sigmas:
            eta_block, delta_block = eta_tilde[:n_eta], eta_tilde[n_eta:]
            sigma_eta, ok = mh_scale_step(
                sigma_eta, lambda s: log_fc_sigma(s, eta_block, upsilon, alpha), step_cap, rng
            )
            accepted["sigma_eta"] += ok
            sigma_delta, ok = mh_scale_step(
                sigma_delta, lambda s: log_fc_sigma(s, delta_block, upsilon, alpha), step_cap, rng
            )
            accepted["sigma_delta"] += ok

        if it > burn_in and (it - burn_in) % thin == 0 and k < n_saved:
            saved[k] = eta_tilde
            se_chain[k] = sigma_eta
            sd_chain[k] = sigma_delta
            k += 1

        if it % log_every == 0:
            logger.info(
                f"hier-poisson sweep {it}/{n_iter}: sigma_eta={sigma_eta:.4g}, "
                f"sigma_delta={sigma_delta:.4g}, accept=({accepted['sigma_eta'] / it:.2f}, "
                f"{accepted['sigma_delta'] / it:.2f})"
            )

    rates = {name: count / n_iter for name, count in accepted.items()}
    logger.info(f"hier-poisson chain: {n_iter} sweeps in {time.time() - start:.1f}s, "
                f"{n_saved} saved, acceptance {rates}")
    return HierPoissonChain(saved, se_chain, sd_chain, rates, n_h, n_s, burn_in, thin, n_iter)


@dataclass
class HierPoissonESNFit:
    """Shared reservoir plus a hierarchical Poisson chain."""
    weights: ReservoirWeights
    chain: HierPoissonChain
    state_of: np.ndarray = field(repr=False)
    nu: float = 0.9

    def fitted_means(self, panel: PanelSeries, states: np.ndarray) -> np.ndarray:
        """Posterior-mean plug-in conditional means, shape (N, T)."""
        H_tilde = merged_design(states, panel)
        return np.exp(H_tilde @ self.chain.posterior_mean()).reshape(panel.N, panel.T)

    def predictive(self, history: PanelSeries, x_next: np.ndarray, n_samples: int,
                   rng: np.random.Generator) -> np.ndarray:
        states = run_states(history, self.weights, self.nu)
        h_next = advance(states[:, -1], history.counts[:, -1], x_next, self.weights, self.nu)
        idx = posterior_draw_indices(self.chain.n_saved, n_samples, rng)
        eta = self.chain.eta_blocks()[idx][:, self.state_of]       # (S, N, n_h)
        delta = self.chain.deltas()[idx][:, self.state_of]         # (S, N)
        psi = np.clip(np.einsum("sin,in->si", eta, h_next) + delta, -PSI_CLIP, PSI_CLIP)
        return rng.poisson(np.exp(psi)).T
