"""Samplers and densities: log-gamma, (conditional) multivariate log-gamma, Polya-Gamma, half-Cauchy, inverse-gamma."""
from dataclasses import dataclass
from typing import Optional, Union
import logging

import numpy as np
from scipy import linalg, sparse, stats
from scipy.sparse import linalg as splinalg
from scipy.special import digamma, gammaln, polygamma

logger = logging.getLogger(__name__)

# Rank / invertibility threshold on condition numbers
COND_MAX = 1e12

MatrixLike = Union[np.ndarray, sparse.spmatrix]


def _positive(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"{name} must be finite and strictly positive")
    return arr


def sample_lg(alpha, kappa, rng: np.random.Generator, size=None):
    """
    Log of a Gamma(shape=alpha, rate=kappa) draw; mean digamma(alpha) - ln(kappa).

    Shapes below 1 use log G(alpha+1) + log(U)/alpha so tiny shapes do not
    underflow to -inf.
    """
    alpha = _positive("alpha", alpha)
    kappa = _positive("kappa", kappa)
    if size is None:
        size = np.broadcast(alpha, kappa).shape
    alpha_b = np.broadcast_to(alpha, size)
    small = alpha_b < 1.0
    g = rng.standard_gamma(np.where(small, alpha_b + 1.0, alpha_b), size=size)
    logs = np.log(g)
    if np.any(small):
        u = rng.random(size=size)
        logs = np.where(small, logs + np.log(u) / alpha_b, logs)
    out = logs - np.log(kappa)
    return float(out) if np.ndim(out) == 0 else out


def lg_mean(alpha, kappa):
    return digamma(alpha) - np.log(kappa)


def lg_var(alpha):
    return polygamma(1, alpha)


@dataclass(frozen=True)
class MLGParams:
    """Multivariate log-gamma q = mu + V w with w_j ~ LG(alpha_j, kappa_j)."""
    mu: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        m = V.shape[0]
        if V.shape != (m, m):
            raise ValueError(f"V must be square, got shape {V.shape}")
        if np.linalg.cond(V) > COND_MAX:
            raise ValueError("V is singular or ill-conditioned (condition number above 1e12)")
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (m,)).copy()
        alpha = np.broadcast_to(_positive("alpha", self.alpha), (m,)).copy()
        kappa = np.broadcast_to(_positive("kappa", self.kappa), (m,)).copy()
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "kappa", kappa)

    @property
    def m(self) -> int:
        return self.V.shape[0]


def sample_mlg(params: MLGParams, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """n_draws x m matrix of draws mu + V w."""
    w = sample_lg(params.alpha, params.kappa, rng, size=(n_draws, params.m))
    return params.mu + w @ params.V.T


def mlg_log_density(q, params: MLGParams) -> float:
    z = np.linalg.solve(params.V, np.asarray(q, dtype=float) - params.mu)
    _, logdet = np.linalg.slogdet(params.V)
    norm = np.sum(params.alpha * np.log(params.kappa) - gammaln(params.alpha))
    return float(-logdet + norm + params.alpha @ z - params.kappa @ np.exp(z))


@dataclass(frozen=True)
class CMLGParams:
    """Conditional MLG: draw w ~ LG(xi, psi) coordinatewise, project onto the column space of L."""
    L: MatrixLike
    xi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        n, k = self.L.shape
        if k > n:
            raise ValueError(f"L must be tall (n >= k), got {n}x{k}")
        xi = np.broadcast_to(_positive("xi", self.xi), (n,)).copy()
        psi = np.broadcast_to(_positive("psi", self.psi), (n,)).copy()
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "psi", psi)

    @property
    def k(self) -> int:
        return self.L.shape[1]


class _NormalEquations:
    """Factorization of L'L, dense Cholesky or sparse LU."""

    def __init__(self, L: MatrixLike):
        self.L = L
        if sparse.issparse(L):
            L = sparse.csc_matrix(L)
            gram = (L.T @ L).tocsc()
            diag = gram.diagonal()
            if np.any(diag <= 0):
                raise ValueError("L is rank-deficient: a column of L is identically zero")
            try:
                self._lu = splinalg.splu(gram)
            except RuntimeError as e:
                raise ValueError(f"L is rank-deficient: {e}")
            u_diag = np.abs(self._lu.U.diagonal())
            if u_diag.min() <= u_diag.max() / COND_MAX:
                raise ValueError("L is rank-deficient (L'L condition number above 1e12)")
            self._solve = self._lu.solve
        else:
            L = np.asarray(L, dtype=float)
            gram = L.T @ L
            if np.linalg.cond(gram) > COND_MAX:
                raise ValueError("L is rank-deficient (L'L condition number above 1e12)")
            factor = linalg.cho_factor(gram, lower=True)
            self._solve = lambda rhs: linalg.cho_solve(factor, rhs)

    def project(self, w: np.ndarray) -> np.ndarray:
        """(L'L)^{-1} L' w for w of shape (n,) or (n, d)."""
        return self._solve(self.L.T @ w)


def sample_cmlg(params: CMLGParams, rng: np.random.Generator, n_draws: Optional[int] = None) -> np.ndarray:
    """
    Draw (L'L)^{-1} L' w with w ~ MLG(0, I, xi, psi).

    Returns a length-k vector, or an (n_draws, k) matrix when n_draws is given.
    """
    solver = _NormalEquations(params.L)
    n = params.L.shape[0]
    if n_draws is None:
        w = sample_lg(params.xi, params.psi, rng, size=(n,))
        return np.asarray(solver.project(w)).reshape(-1)
    w = sample_lg(params.xi, params.psi, rng, size=(n_draws, n))
    return np.asarray(solver.project(w.T)).T


def sample_pg(b, c, rng: np.random.Generator, method: str = "polyagamma",
              truncation: int = 200, size=None):
    """
    Polya-Gamma PG(b, c) draws.

    method "polyagamma" uses the polyagamma package (exact samplers, any b > 0);
    "series" uses the truncated sum of gammas with mean correction.
    """
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any(b <= 0) or not np.all(np.isfinite(b)):
        raise ValueError("Polya-Gamma shape b must be finite and > 0")

    if method == "polyagamma":
        from polyagamma import random_polyagamma

        return random_polyagamma(b, c, size=size, random_state=rng)
    if method != "series":
        raise ValueError(f"Unknown Polya-Gamma method: {method}")

    shape = np.broadcast(b, c).shape if size is None else size
    bb = np.broadcast_to(b, shape).reshape(-1)
    cc = np.broadcast_to(c, shape).reshape(-1)
    k_sq = (np.arange(truncation) + 0.5) ** 2
    denom = k_sq[None, :] + cc[:, None] ** 2 / (4.0 * np.pi ** 2)
    g = rng.standard_gamma(np.repeat(bb[:, None], truncation, axis=1))
    x = np.sum(g / denom, axis=1) / (2.0 * np.pi ** 2)

    # rescale so the truncated series has the exact mean b/(2c) tanh(c/2)
    half = np.maximum(np.abs(cc) / 2.0, 1e-8)
    full_mean = np.tanh(half) / half / 4.0
    trunc_mean = np.sum(1.0 / denom, axis=1) / (2.0 * np.pi ** 2)
    x = x * full_mean / trunc_mean
    x = x.reshape(shape)
    return float(x) if x.ndim == 0 else x


def pg_mean(b, c):
    """E[PG(b, c)] = b/(2c) tanh(c/2), with limit b/4 at c = 0."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    safe = np.where(c < 1e-8, 1.0, c)
    return np.where(c < 1e-8, b / 4.0, b / (2.0 * safe) * np.tanh(safe / 2.0))


def sample_half_cauchy(scale, rng: np.random.Generator, size=None):
    scale = _positive("scale", scale)
    return stats.halfcauchy.rvs(scale=scale, size=size, random_state=rng)


def sample_inv_gamma(shape, rate, rng: np.random.Generator, size=None):
    """Inverse-gamma with density proportional to x^(-shape-1) exp(-rate/x)."""
    shape = _positive("shape", shape)
    rate = _positive("rate", rate)
    return stats.invgamma.rvs(a=shape, scale=rate, size=size, random_state=rng)
