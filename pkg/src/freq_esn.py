"""Frequentist Poisson ESNs fit by LASSO-penalized likelihood."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import time

import numpy as np

from src.config import ReservoirSpec
from src.errors import NumericalError
from src.panel_data import PanelSeries
from src.reservoir import ReservoirWeights, advance, gen_weights, run_states

logger = logging.getLogger(__name__)

# Backtracking halves the step at most this many times per iteration
MAX_HALVINGS = 60
STEP_GROWTH = 1.5


@dataclass
class PenalizedFit:
    """Result of one penalized Poisson fit."""
    eta: np.ndarray
    tau: float
    objective_trace: np.ndarray
    converged: bool
    n_iter: int = 0

    def to_dict(self) -> Dict:
        return {
            "eta": self.eta.tolist(),
            "tau": self.tau,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "objective": float(self.objective_trace[-1]),
        }


def soft_threshold(v: np.ndarray, c) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - c, 0.0)


def _loglik(H: np.ndarray, Y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    theta = np.einsum("btn,bn->bt", H, eta)
    with np.errstate(over="ignore"):
        return np.sum(Y * theta - np.exp(theta), axis=1)


def _gradient(H: np.ndarray, Y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    theta = np.einsum("btn,bn->bt", H, eta)
    return np.einsum("btn,bt->bn", H, Y - np.exp(theta))


def _prox_ascent(
    H: np.ndarray,
    Y: np.ndarray,
    tau: float,
    tol: float,
    max_iter: int,
    kkt_tol: float,
) -> Tuple[np.ndarray, List[List[float]], np.ndarray, np.ndarray]:
    """
    Proximal gradient ascent on sum(y theta - e^theta) - tau |eta|_1 for a batch of problems.

    H is (B, T, n), Y is (B, T). Every problem keeps its own step size; a
    problem stops once the objective change is below tol and the gradient
    mapping is below kkt_tol.
    """
    B, _, n = H.shape
    eta = np.zeros((B, n))
    fro = np.einsum("btn,btn->b", H, H)
    step = 1.0 / np.maximum(fro * np.maximum(Y.mean(axis=1), 1.0), 1e-12)

    f = _loglik(H, Y, eta)
    F = f - tau * np.abs(eta).sum(axis=1)
    traces: List[List[float]] = [[float(v)] for v in F]
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    n_iter = np.zeros(B, dtype=np.int64)

    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Hb, Yb, eb, fb = H[idx], Y[idx], eta[idx], f[idx]
        g = _gradient(Hb, Yb, eb)
        s = step[idx].copy()

        cand = soft_threshold(eb + s[:, None] * g, (s * tau)[:, None])
        f_cand = _loglik(Hb, Yb, cand)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(MAX_HALVINGS):
            d = cand - eb
            model = fb + np.sum(g * d, axis=1) - np.sum(d * d, axis=1) / (2.0 * s)
            ok = np.isfinite(f_cand) & (f_cand >= model - 1e-12 * np.abs(fb))
            pending = ~ok
            if not pending.any():
                break
            s[pending] *= 0.5
            cand[pending] = soft_threshold(
                eb[pending] + s[pending, None] * g[pending], (s[pending] * tau)[:, None]
            )
            f_cand[pending] = _loglik(Hb[pending], Yb[pending], cand[pending])

        if pending.any():
            # step collapsed: no further ascent possible in floating point
            stalled = idx[pending]
            active[stalled] = False
            logger.debug(f"Backtracking stalled for {stalled.size} problem(s) at iteration {it}")
            keep = ~pending
            idx, cand, f_cand, s, eb = idx[keep], cand[keep], f_cand[keep], s[keep], eb[keep]

        F_new = f_cand - tau * np.abs(cand).sum(axis=1)
        if not np.all(np.isfinite(F_new)):
            bad = idx[~np.isfinite(F_new)]
            raise NumericalError(
                f"Penalized Poisson objective became non-finite at iteration {it} "
                f"for problem(s) {bad.tolist()}"
            )

        dF = F_new - F[idx]
        grad_map = np.max(np.abs(cand - eb), axis=1) / s
        eta[idx] = cand
        f[idx] = f_cand
        F[idx] = F_new
        n_iter[idx] = it
        for j, b in enumerate(idx):
            traces[b].append(float(F_new[j]))

        done = (np.abs(dF) <= tol) & (grad_map <= kkt_tol)
        converged[idx[done]] = True
        active[idx[done]] = False
        step[idx] = s * STEP_GROWTH

    return eta, traces, converged, n_iter


def fit_penalized_poisson(
    H: np.ndarray,
    y: np.ndarray,
    tau: float,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    kkt_tol: float = 1e-7,
) -> PenalizedFit:
    """
    Maximize sum_t [y_t theta_t - exp(theta_t)] - tau * sum_j |eta_j|, theta = H eta.

    Non-convergence within max_iter is flagged; the last (best) iterate is returned.
    """
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    if H.ndim != 2 or H.shape[0] != y.shape[0]:
        raise ValueError(f"design shape {H.shape} does not match {y.shape[0]} observations")
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    if not np.all(np.isfinite(H)):
        raise ValueError("design matrix has non-finite entries")
    fits = fit_penalized_batch(H[None], y[None], tau, tol, max_iter, kkt_tol)
    return fits[0]


def fit_penalized_batch(
    H: np.ndarray,
    Y: np.ndarray,
    tau: float,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    kkt_tol: float = 1e-7,
) -> List[PenalizedFit]:
    """Independent penalized fits for a stack of designs (B, T, n) and counts (B, T)."""
    eta, traces, converged, n_iter = _prox_ascent(
        np.asarray(H, dtype=float), np.asarray(Y, dtype=float), tau, tol, max_iter, kkt_tol
    )
    if not converged.all():
        logger.warning(
            f"{int((~converged).sum())} of {len(converged)} penalized fits did not converge "
            f"(tau={tau}, max_iter={max_iter}); returning last iterate"
        )
    return [
        PenalizedFit(eta[b], tau, np.asarray(traces[b]), bool(converged[b]), int(n_iter[b]))
        for b in range(len(traces))
    ]


def kkt_violation(H: np.ndarray, y: np.ndarray, fit: PenalizedFit) -> float:
    """Largest violation of the soft-threshold optimality conditions."""
    theta = H @ fit.eta
    g = H.T @ (y - np.exp(theta))
    nz = fit.eta != 0
    viol = np.where(nz, np.abs(g - fit.tau * np.sign(fit.eta)), np.maximum(np.abs(g) - fit.tau, 0.0))
    return float(viol.max()) if viol.size else 0.0


@dataclass
class SingleESNFit:
    """One reservoir plus a penalized fit per school."""
    weights: ReservoirWeights
    fits: List[PenalizedFit]
    nu: float

    @property
    def eta(self) -> np.ndarray:
        return np.stack([f.eta for f in self.fits])

    def fitted_means(self, states: np.ndarray) -> np.ndarray:
        """In-sample conditional means exp(h[i, t]' eta_i), shape (N, T)."""
        return np.exp(np.einsum("itn,in->it", states, self.eta))

    def forecast_means(self, history: PanelSeries, x_next: np.ndarray) -> np.ndarray:
        """One-step means for the year after the history, advancing from the last observed count."""
        states = run_states(history, self.weights, self.nu)
        h_next = advance(states[:, -1], history.counts[:, -1], x_next, self.weights, self.nu)
        return np.exp(np.sum(h_next * self.eta, axis=1))

    def to_dict(self) -> Dict:
        return {
            "reservoir": self.weights.spec.model_dump(),
            "lambda_W": self.weights.lambda_W,
            "nu": self.nu,
            "schools": [f.to_dict() for f in self.fits],
        }


def _chunks(n: int, workers: int) -> List[np.ndarray]:
    return [c for c in np.array_split(np.arange(n), max(1, min(workers, n))) if c.size]


def fit_single_esn(
    panel: PanelSeries,
    spec: ReservoirSpec,
    tau: float,
    workers: int = 1,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> SingleESNFit:
    """Generate one reservoir, roll hidden states, and fit each school independently."""
    if spec.r != panel.r:
        spec = spec.model_copy(update={"r": panel.r})
    weights = gen_weights(spec)
    states = run_states(panel, weights, spec.nu)
    Y = panel.counts.astype(float)

    chunks = _chunks(panel.N, workers)
    if len(chunks) == 1:
        fits = fit_penalized_batch(states, Y, tau, tol, max_iter)
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda c: fit_penalized_batch(states[c], Y[c], tau, tol, max_iter),
                                  chunks))
        fits = [f for part in parts for f in part]
    return SingleESNFit(weights, fits, spec.nu)


@dataclass
class EnsembleFit:
    """Single ESN fits that share a spec and differ in reservoir seed."""
    members: List[SingleESNFit] = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.members)

    def forecast_means(self, history: PanelSeries, x_next: np.ndarray) -> np.ndarray:
        """Member one-step means, shape (M, N)."""
        return np.stack([m.forecast_means(history, x_next) for m in self.members])

    def fitted_means(self, panel: PanelSeries) -> np.ndarray:
        """Average of the member in-sample means, shape (N, T)."""
        return np.mean(
            [m.fitted_means(run_states(panel, m.weights, m.nu)) for m in self.members], axis=0
        )

    def to_dict(self) -> Dict:
        return {"M": self.M, "members": [m.to_dict() for m in self.members]}


def fit_ensemble_esn(
    panel: PanelSeries,
    spec: ReservoirSpec,
    tau: float,
    M: int,
    base_seed: int,
    workers: int = 1,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    seeds: Optional[Sequence[int]] = None,
) -> EnsembleFit:
    """M reservoirs seeded base_seed .. base_seed + M - 1, each fit as a single ESN."""
    if M < 2:
        raise ValueError(f"an ensemble needs M >= 2 members, got {M}")
    seeds = list(seeds) if seeds is not None else [base_seed + m for m in range(M)]
    if len(seeds) != M:
        raise ValueError(f"{len(seeds)} seeds given for {M} members")

    start = time.time()
    members = [
        fit_single_esn(panel, spec.model_copy(update={"seed": s}), tau, workers, tol, max_iter)
        for s in seeds
    ]
    logger.info(f"Fit ensemble of {M} reservoirs on {panel.N} schools in {time.time() - start:.1f}s")
    return EnsembleFit(members)


def ensemble_predictive(
    member_means: np.ndarray,
    draws_per_member: int,
    rng: np.random.Generator,
    level: float = 0.95,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Pool Poisson draws from every member's mean.

    Returns (point, lower, upper, samples) with samples of shape (N, M*K) and
    the point forecast equal to the average member mean.
    """
    M, N = member_means.shape
    draws = rng.poisson(np.repeat(member_means.T[:, :, None], draws_per_member, axis=2))
    samples = draws.reshape(N, M * draws_per_member)
    tail = 100.0 * (1.0 - level) / 2.0
    lower, upper = np.percentile(samples, [tail, 100.0 - tail], axis=1)
    return member_means.mean(axis=0), lower, upper, samples


@dataclass
class CVResult:
    """Outcome of a rolling one-step-ahead search over reservoirs and penalties."""
    spec: ReservoirSpec
    tau: float
    rows: List[Dict] = field(default_factory=list)

    @property
    def best_mspe(self) -> float:
        return min(r["mspe"] for r in self.rows)


def _cv_mspe(panel: PanelSeries, spec: ReservoirSpec, tau: float, first: int,
             workers: int, tol: float, max_iter: int) -> float:
    errors = []
    for k in range(first, panel.T):
        history = panel.truncate(k)
        fit = fit_single_esn(history, spec, tau, workers, tol, max_iter)
        mean = fit.forecast_means(history, panel.covariates[:, k])
        errors.append(np.mean((mean - panel.counts[:, k]) ** 2))
    return float(np.mean(errors))


def select_hyperparameters(
    panel: PanelSeries,
    specs: Sequence[ReservoirSpec],
    tau_grid: Sequence[float],
    cv_years: int,
    workers: int = 1,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> CVResult:
    """
    Choose a reservoir and tau jointly by one-step-ahead MSPE over the last
    cv_years years of the panel.

    Every origin refits on the years before it. Ties keep the earlier
    candidate, so the order of specs and tau_grid decides them.
    """
    if not specs or not tau_grid:
        raise ValueError("select_hyperparameters needs at least one reservoir and one tau")
    first = panel.T - cv_years
    if first < 2:
        raise ValueError(f"cross-validation over {cv_years} years needs T > {cv_years + 1}")

    start = time.time()
    rows: List[Dict] = []
    best: Optional[Tuple[float, ReservoirSpec, float]] = None
    for spec in specs:
        for tau in tau_grid:
            score = _cv_mspe(panel, spec, float(tau), first, workers, tol, max_iter)
            rows.append({"a": spec.a_w, "pi": spec.pi_w, "n_h": spec.n_h, "nu": spec.nu,
                         "tau": float(tau), "mspe": score})
            if best is None or score < best[0]:
                best = (score, spec, float(tau))
    score, spec, tau = best
    logger.info(f"Cross-validated {len(rows)} candidate(s) in {time.time() - start:.1f}s: "
                f"n_h={spec.n_h}, a={spec.a_w}, pi={spec.pi_w}, nu={spec.nu}, tau={tau} "
                f"(MSPE {score:.4g})")
    return CVResult(spec, tau, rows)


def select_tau(
    panel: PanelSeries,
    spec: ReservoirSpec,
    tau_grid: Sequence[float],
    cv_years: int,
    workers: int = 1,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> Tuple[float, Dict[float, float]]:
    """Choose tau alone for a fixed reservoir; returns (tau, MSPE per tau)."""
    result = select_hyperparameters(panel, [spec], tau_grid, cv_years, workers, tol, max_iter)
    return result.tau, {r["tau"]: r["mspe"] for r in result.rows}
