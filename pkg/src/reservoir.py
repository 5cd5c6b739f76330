"""Fixed spike-and-slab reservoirs and the hidden-state recursion."""
from dataclasses import dataclass
from typing import Callable, Optional
import logging

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg
from scipy.special import expit

from src.config import ReservoirSpec
from src.panel_data import PanelSeries

logger = logging.getLogger(__name__)

# Above this size the dominant eigenvalue comes from ARPACK instead of a dense solve
DENSE_EIG_MAX = 200

ACTIVATIONS: dict = {
    "tanh": np.tanh,
    "sigmoid": expit,
}


@dataclass(frozen=True)
class ReservoirWeights:
    """Reservoir matrices W (n_h x n_h), U_Y (p x n_h), U_X (r x n_h) and lambda_W."""
    W: np.ndarray
    U_Y: np.ndarray
    U_X: np.ndarray
    lambda_W: float
    spec: ReservoirSpec

    def __post_init__(self):
        for name in ("W", "U_Y", "U_X"):
            a = np.array(getattr(self, name), dtype=float, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_h(self) -> int:
        return self.W.shape[0]

    @property
    def r(self) -> int:
        return self.U_X.shape[0]

    @property
    def activation(self) -> Callable[[np.ndarray], np.ndarray]:
        return ACTIVATIONS[self.spec.activation]

    def recurrent_matrix(self, nu: float) -> np.ndarray:
        """(nu / lambda_W) * W, or zeros when the spectral radius is 0."""
        if self.lambda_W == 0.0:
            return np.zeros_like(self.W)
        return (nu / self.lambda_W) * self.W

    def save(self, path: str) -> None:
        np.savez(
            path,
            W=self.W,
            U_Y=self.U_Y,
            U_X=self.U_X,
            lambda_W=np.array(self.lambda_W),
            spec=np.array(self.spec.model_dump_json()),
        )

    @classmethod
    def load(cls, path: str) -> "ReservoirWeights":
        with np.load(path, allow_pickle=False) as data:
            spec = ReservoirSpec.model_validate_json(str(data["spec"]))
            return cls(data["W"], data["U_Y"], data["U_X"], float(data["lambda_W"]), spec)


def _spike_and_slab(rng: np.random.Generator, shape, pi: float, a: float) -> np.ndarray:
    mask = rng.random(shape) < pi
    values = rng.uniform(-a, a, size=shape)
    return np.where(mask, values, 0.0)


def gen_weights(spec: ReservoirSpec) -> ReservoirWeights:
    """Draw W, U_Y, U_X entrywise: 0 with probability 1 - pi, else Uniform(-a, a)."""
    rng = np.random.default_rng(spec.seed)
    W = _spike_and_slab(rng, (spec.n_h, spec.n_h), spec.pi_w, spec.a_w)
    U_Y = _spike_and_slab(rng, (spec.p, spec.n_h), spec.pi_uY, spec.a_uY)
    U_X = _spike_and_slab(rng, (spec.r, spec.n_h), spec.pi_uX, spec.a_uX)
    lam = spectral_radius(W)
    logger.debug(f"Reservoir seed={spec.seed}: nnz(W)={np.count_nonzero(W)}, lambda_W={lam:.6g}")
    return ReservoirWeights(W, U_Y, U_X, lam, spec)


def spectral_radius(W: np.ndarray, tol: float = 1e-8) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"spectral_radius needs a square matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("spectral_radius: matrix has non-finite entries")
    if not np.any(W):
        return 0.0

    n = W.shape[0]
    if n <= DENSE_EIG_MAX:
        return float(np.max(np.abs(np.linalg.eigvals(W))))

    try:
        v0 = np.ones(n)
        eigenvalues = splinalg.eigs(sparse.csr_matrix(W), k=1, which="LM", tol=tol,
                                    v0=v0, return_eigenvectors=False)
        return float(np.abs(eigenvalues[0]))
    except splinalg.ArpackNoConvergence:
        logger.warning(f"ARPACK did not converge for a {n}x{n} reservoir; using dense solve")
        return float(np.max(np.abs(np.linalg.eigvals(W))))


def advance(
    h_prev: np.ndarray,
    y_prev,
    x_t: np.ndarray,
    w: ReservoirWeights,
    nu: Optional[float] = None,
) -> np.ndarray:
    """
    One step of the recursion g((nu/lambda_W) W'h + ln(y+1) U_Y' + U_X' x).

    Leading dimensions broadcast, so a whole cross-section of schools can be
    advanced at once: h_prev (..., n_h), y_prev (...), x_t (..., r).
    """
    nu = w.spec.nu if nu is None else nu
    h_prev = np.asarray(h_prev, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    if h_prev.shape[-1] != w.n_h:
        raise ValueError(f"hidden state has length {h_prev.shape[-1]}, reservoir has n_h={w.n_h}")
    if x_t.shape[-1] != w.r:
        raise ValueError(f"covariate vector has length {x_t.shape[-1]}, reservoir expects r={w.r}")
    y_term = np.log1p(np.asarray(y_prev, dtype=float))[..., None] * w.U_Y[0]
    pre = h_prev @ w.recurrent_matrix(nu) + y_term + x_t @ w.U_X
    return w.activation(pre)


def initial_state(x_1: np.ndarray, w: ReservoirWeights) -> np.ndarray:
    x_1 = np.asarray(x_1, dtype=float)
    if x_1.shape[-1] != w.r:
        raise ValueError(f"covariate vector has length {x_1.shape[-1]}, reservoir expects r={w.r}")
    return w.activation(x_1 @ w.U_X)


def run_states(panel: PanelSeries, w: ReservoirWeights, nu: Optional[float] = None) -> np.ndarray:
    """Hidden states h[i, t] for every school and year, shape (N, T, n_h)."""
    if panel.r != w.r:
        raise ValueError(f"panel has r={panel.r} covariates, reservoir expects r={w.r}")
    h = np.empty((panel.N, panel.T, w.n_h))
    h[:, 0] = initial_state(panel.covariates[:, 0], w)
    for t in range(1, panel.T):
        h[:, t] = advance(h[:, t - 1], panel.counts[:, t - 1], panel.covariates[:, t], w, nu)
    h.setflags(write=False)
    return h


def merged_design(states: np.ndarray, panel: PanelSeries) -> sparse.csr_matrix:
    """
    Stacked hierarchical design of shape (N*T, n_h*n_s + n_s), rows school-major.

    Row (i, t) carries h[i, t] in the column block of state s(i) and a 1 in
    column n_h*n_s + s(i).
    """
    n, t, n_h = states.shape
    if (n, t) != (panel.N, panel.T):
        raise ValueError(f"states shape {states.shape[:2]} does not match panel ({panel.N}, {panel.T})")
    n_s = panel.n_states

    rows = np.arange(n * t)
    state_per_row = np.repeat(panel.state_of, t)
    h_cols = state_per_row[:, None] * n_h + np.arange(n_h)[None, :]
    ind_cols = n_h * n_s + state_per_row

    data = np.concatenate([states.reshape(n * t, n_h), np.ones((n * t, 1))], axis=1)
    cols = np.concatenate([h_cols, ind_cols[:, None]], axis=1)
    H = sparse.csr_matrix(
        (data.ravel(), (np.repeat(rows, n_h + 1), cols.ravel())),
        shape=(n * t, n_h * n_s + n_s),
    )
    return H


def state_block_columns(state: int, n_h: int, n_states: int) -> np.ndarray:
    """Columns of the merged design that belong to one state: its eta block then its delta."""
    return np.append(np.arange(state * n_h, (state + 1) * n_h), n_h * n_states + state)
