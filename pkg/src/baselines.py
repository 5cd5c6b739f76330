"""Reference models: per-school intercept and Poisson INGARCH(1,1)."""
from dataclasses import dataclass
from typing import Dict, Tuple
import logging

import numpy as np
from scipy import optimize, signal, stats

logger = logging.getLogger(__name__)

# Series shorter than this fall back to the intercept model
MIN_INGARCH_T = 10
# Weight of the log-barrier keeping alpha1 + beta1 below 1
BARRIER_WEIGHT = 1e-4
# alpha1 + beta1 above this is reported as a boundary solution
BOUNDARY = 0.99


def fit_intercept(y) -> float:
    """Poisson MLE of a constant mean: the sample mean."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("fit_intercept needs at least one observation")
    return float(y.mean())


def poisson_kernel_loglik(y: np.ndarray, lam: np.ndarray) -> float:
    """sum(y ln(lambda) - lambda), with 0 ln 0 taken as 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(y > 0, y * np.log(lam), 0.0) - lam
    return float(np.sum(terms))


def ingarch_intensity(y: np.ndarray, beta0: float, alpha1: float, beta1: float) -> np.ndarray:
    """lambda_1 = mean(y); lambda_t = beta0 + alpha1 lambda_{t-1} + beta1 y_{t-1}."""
    y = np.asarray(y, dtype=float)
    lam1 = y.mean()
    if y.size == 1:
        return np.array([lam1])
    drive = beta0 + beta1 * y[:-1]
    rest, _ = signal.lfilter([1.0], [1.0, -alpha1], drive, zi=[alpha1 * lam1])
    return np.concatenate([[lam1], rest])


@dataclass
class IngarchFit:
    """Fitted INGARCH(1,1) parameters with the filtered intensity at the last year."""
    beta0: float
    alpha1: float
    beta1: float
    loglik: float
    converged: bool
    lambda_last: float
    y_last: float
    fallback: bool = False
    boundary: bool = False

    def next_mean(self) -> float:
        return next_intensity(self.beta0, self.alpha1, self.beta1, self.lambda_last, self.y_last)

    def to_dict(self) -> Dict:
        return {
            "beta0": self.beta0,
            "alpha1": self.alpha1,
            "beta1": self.beta1,
            "loglik": self.loglik,
            "converged": self.converged,
            "fallback": self.fallback,
            "boundary": self.boundary,
            "lambda_last": self.lambda_last,
        }


def next_intensity(beta0: float, alpha1: float, beta1: float, lambda_last: float, y_last: float) -> float:
    return beta0 + alpha1 * lambda_last + beta1 * y_last


def _negative_objective(params: np.ndarray, y: np.ndarray) -> float:
    beta0, alpha1, beta1 = params
    slack = 1.0 - alpha1 - beta1
    if slack <= 1e-12 or beta0 <= 0:
        return 1e10
    lam = ingarch_intensity(y, beta0, alpha1, beta1)
    if np.any(lam <= 0):
        return 1e10
    return -(poisson_kernel_loglik(y, lam) + BARRIER_WEIGHT * np.log(slack))


def _intercept_fallback(y: np.ndarray) -> IngarchFit:
    ybar = float(y.mean())
    lam = np.full(y.size, ybar)
    return IngarchFit(ybar, 0.0, 0.0, poisson_kernel_loglik(y, lam), True,
                      ybar, float(y[-1]), fallback=True)


def fit_ingarch11(y, tol: float = 1e-8) -> IngarchFit:
    """
    Conditional Poisson maximum likelihood for INGARCH(1,1).

    Box-constrained L-BFGS-B from several starts, the intercept point among
    them, so the result never has a lower likelihood than the intercept model.
    """
    y = np.asarray(y, dtype=float)
    if y.size < MIN_INGARCH_T or not np.any(y > 0):
        logger.debug(f"INGARCH fallback to intercept (T={y.size}, all zero={not np.any(y > 0)})")
        return _intercept_fallback(y)

    ybar = y.mean()
    starts = [
        (ybar, 0.0, 0.0),
        (ybar * 0.3, 0.3, 0.4),
        (ybar * 0.5, 0.1, 0.4),
        (ybar * 0.2, 0.6, 0.2),
    ]
    bounds = [(1e-8, None), (0.0, 0.999), (0.0, 0.999)]

    best = None
    for x0 in starts:
        res = optimize.minimize(
            _negative_objective, np.array(x0), args=(y,), method="L-BFGS-B", bounds=bounds,
            options={"ftol": 1e-14, "gtol": tol, "maxiter": 2000},
        )
        if best is None or res.fun < best.fun:
            best = res

    start_value = _negative_objective(np.array(starts[0]), y)
    if best.fun > start_value:
        params, converged = np.array(starts[0]), False
    else:
        params, converged = best.x, bool(best.success)

    beta0, alpha1, beta1 = (float(v) for v in params)
    lam = ingarch_intensity(y, beta0, alpha1, beta1)
    boundary = alpha1 + beta1 > BOUNDARY or beta0 <= 1e-6
    if not converged:
        logger.warning(f"INGARCH fit did not converge: {best.message}")
    if boundary:
        logger.debug(f"INGARCH boundary solution: beta0={beta0:.4g}, alpha1+beta1={alpha1 + beta1:.4f}")
    return IngarchFit(beta0, alpha1, beta1, poisson_kernel_loglik(y, lam), converged,
                      float(lam[-1]), float(y[-1]), boundary=boundary)


def ingarch_interval(lambda_next: float, level: float = 0.95) -> Tuple[float, float]:
    """Equal-tail Poisson quantile interval at the plug-in mean."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    if lambda_next <= 0:
        return 0.0, 0.0
    tail = (1.0 - level) / 2.0
    return float(stats.poisson.ppf(tail, lambda_next)), float(stats.poisson.ppf(1.0 - tail, lambda_next))


def poisson_intervals(means: np.ndarray, level: float = 0.95) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized equal-tail Poisson quantile intervals; zero means give (0, 0)."""
    tail = (1.0 - level) / 2.0
    means = np.asarray(means, dtype=float)
    safe = np.where(means > 0, means, 1.0)
    lower = np.where(means > 0, stats.poisson.ppf(tail, safe), 0.0)
    upper = np.where(means > 0, stats.poisson.ppf(1.0 - tail, safe), 0.0)
    return lower, upper
