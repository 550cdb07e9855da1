"""Spike-and-slab lasso prior on the feature-to-factor loadings.

Each loading ``w_jk`` has prior ``g * Laplace(lam1) + (1 - g) * Laplace(lam0)``
with a Bernoulli(eta_k) inclusion indicator and a Beta(a, b) prior on each
column rate eta_k. Inclusion probabilities and rates are refreshed in closed
form (E-step / M-step); only the loadings themselves see gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

ETA_MIN = 1e-6
ETA_MAX = 1.0 - 1e-6


@dataclass
class FactorLoadings:
    W: np.ndarray
    omic: str = ""

    def __post_init__(self):
        if self.W.ndim != 2:
            raise ShapeError(f"loadings must be 2-d, got {self.W.shape}")

    @property
    def shape(self):
        return self.W.shape


def init_loadings(n_features: int, k: int, rng: np.random.Generator, omic: str = "") -> FactorLoadings:
    return FactorLoadings(rng.uniform(-0.1, 0.1, size=(n_features, k)), omic)


@dataclass
class SSLState:
    gamma: np.ndarray
    eta: np.ndarray
    lambda0: float = 10.0
    lambda1: float = 1.0
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ContractError("lambda1 must be positive")
        if self.lambda0 < self.lambda1:
            raise ContractError("spike scale lambda0 must be >= slab scale lambda1")
        if self.a < 1 or self.b < 1:
            raise ContractError("Beta hyperparameters must be >= 1")
        if self.gamma.ndim != 2 or self.eta.shape != (self.gamma.shape[1],):
            raise ShapeError("gamma must be D x K and eta length K")

    def copy(self) -> "SSLState":
        return SSLState(self.gamma.copy(), self.eta.copy(), self.lambda0, self.lambda1, self.a, self.b)


def init_ssl_state(W: np.ndarray, lambda0=10.0, lambda1=1.0, a=1.0, b=1.0, eta0=0.5) -> SSLState:
    d, k = W.shape
    state = SSLState(np.zeros((d, k)), np.full(k, eta0), lambda0, lambda1, a, b)
    state.gamma = ssl_gamma_update(W, state)
    return state


def laplace_density(w, lam):
    return 0.5 * lam * np.exp(-lam * np.abs(w))


def ssl_gamma_update(W, state: SSLState) -> np.ndarray:
    """Posterior inclusion probability of every loading (E-step).

    Evaluated through the log-density difference so that large |w| cannot
    underflow both mixture components at once.
    """
    W = W.W if isinstance(W, FactorLoadings) else W
    absw = np.abs(W)
    eta = state.eta[None, :]
    # log of slab/spike density ratio, lam1 e^{-lam1|w|} / lam0 e^{-lam0|w|}
    log_ratio = math.log(state.lambda1 / state.lambda0) + (state.lambda0 - state.lambda1) * absw
    log_odds = log_ratio + np.log(eta) - np.log1p(-eta)
    return _sigmoid(log_odds)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ssl_eta_update(gamma: np.ndarray, state: SSLState, n_features: int | None = None) -> np.ndarray:
    """Beta-Bernoulli posterior mode for each column rate (M-step)."""
    d = gamma.shape[0] if n_features is None else n_features
    denom = state.a + state.b + d - 2.0
    if denom <= 0:
        raise ContractError(f"a + b + D - 2 = {denom} must be positive")
    eta = (state.a - 1.0 + gamma.sum(axis=0)) / denom
    return np.clip(eta, ETA_MIN, ETA_MAX)


def ssl_em_update(W, state: SSLState) -> SSLState:
    """One E-step then M-step, updating ``state`` in place."""
    W = W.W if isinstance(W, FactorLoadings) else W
    state.gamma = ssl_gamma_update(W, state)
    state.eta = ssl_eta_update(state.gamma, state, W.shape[0])
    return state


def effective_lambda(gamma, state: SSLState):
    return gamma * state.lambda1 + (1.0 - gamma) * state.lambda0


def ssl_penalty_grad(W, gamma, state: SSLState) -> np.ndarray:
    """Gradient of the expected negative log prior w.r.t. W (gamma held fixed).

    ``sign(0) = 0``, the subgradient at the kink.
    """
    W = W.W if isinstance(W, FactorLoadings) else W
    return effective_lambda(gamma, state) * np.sign(W)


def ssl_penalty_value(W, gamma, state: SSLState) -> float:
    """Expected complete-data negative log prior, E_gamma[-log p(W|G) p(G|eta) p(eta)]."""
    W = W.W if isinstance(W, FactorLoadings) else W
    g = gamma
    eta = state.eta[None, :]
    lam0, lam1 = state.lambda0, state.lambda1
    laplace = effective_lambda(g, state) * np.abs(W) - g * math.log(lam1 / 2.0) - (1.0 - g) * math.log(lam0 / 2.0)
    bernoulli = -(g * np.log(eta) + (1.0 - g) * np.log1p(-eta))
    e = state.eta
    log_beta = math.lgamma(state.a) + math.lgamma(state.b) - math.lgamma(state.a + state.b)
    beta = -((state.a - 1.0) * np.log(e) + (state.b - 1.0) * np.log1p(-e)) + log_beta
    return float(laplace.sum() + bernoulli.sum() + beta.sum())


def active_map(W, threshold: float = 0.01) -> np.ndarray:
    """Binary map of loadings with ``|w| > threshold`` (strict)."""
    if threshold < 0:
        raise ContractError("threshold must be non-negative")
    W = W.W if isinstance(W, FactorLoadings) else W
    return np.abs(W) > threshold


def support_f1(estimated, truth, threshold: float = 0.01) -> float:
    """F1 of the active map of ``estimated`` against the nonzero pattern of ``truth``.

    Both arguments are lists of per-omic loadings. Latent factors are only
    identified up to order, so the columns of the estimate are first matched
    to the true columns (one permutation shared by every omic, since z is
    shared) to maximise the overlap of the two supports.
    """
    from scipy.optimize import linear_sum_assignment

    est = np.vstack([active_map(W, threshold) for W in estimated])
    true = np.vstack([np.asarray(W) != 0 for W in truth])
    if est.shape[0] != true.shape[0]:
        raise ShapeError(f"estimated loadings cover {est.shape[0]} features, truth {true.shape[0]}")
    overlap = true.T.astype(np.int64) @ est.astype(np.int64)  # true col x est col
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    tp = int(overlap[rows, cols].sum())
    n_est, n_true = int(est.sum()), int(true.sum())
    if n_est + n_true == 0:
        return 1.0
    return 2.0 * tp / (n_est + n_true)
