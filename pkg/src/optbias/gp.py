"""Gaussian-process machinery: RBF / Matern-5/2 kernels, posterior mean and
variance, analytic input-gradient of the posterior mean, UCB, and grid-based
marginal-likelihood hyperparameter selection.

The posterior here is deliberately lightweight: it drives synthetic trajectory
generation, not high-fidelity prediction, so the hyperparameter fit is a small
deterministic grid search rather than gradient-based MLL.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .dataio import OfflineDataset
from .errors import NumericalError
from .numerics import cholesky_factor, cholesky_solve

log = logging.getLogger(__name__)

RBF = "rbf"
MATERN52 = "matern52"

SQRT5 = np.sqrt(5.0)


class DimensionMismatch(NumericalError):
    pass


class EmptyGrid(NumericalError):
    pass


@dataclass(frozen=True)
class KernelParams:
    family: str = RBF
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 0.01
    mean: float = 0.0

    def __post_init__(self):
        if self.family not in (RBF, MATERN52):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.lengthscale <= 0 or self.signal_variance <= 0 or self.noise_variance < 0:
            raise ValueError(f"invalid kernel parameters: {self}")

    def with_mean(self, m: float) -> "KernelParams":
        return replace(self, mean=float(m))


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at 0."""
    d2 = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    return np.maximum(d2, 0.0)


def kernel_matrix(p: KernelParams, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"dim mismatch: {A.shape[1]} vs {B.shape[1]}")
    d2 = _sqdist(A, B)
    if p.family == RBF:
        return p.signal_variance * np.exp(-0.5 * d2 / p.lengthscale**2)
    r = np.sqrt(d2)
    s = SQRT5 * r / p.lengthscale
    return p.signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


def kernel_eval(p: KernelParams, x: np.ndarray, x2: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    x2 = np.asarray(x2, dtype=np.float64).ravel()
    if x.shape != x2.shape:
        raise DimensionMismatch(f"{x.shape} vs {x2.shape}")
    return float(kernel_matrix(p, x[None, :], x2[None, :])[0, 0])


def _grad_weights(p: KernelParams, K: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """w such that grad_x k(x_i, x_j) = w[i, j] * (x_i - x_j)."""
    if p.family == RBF:
        return -K / p.lengthscale**2
    r = np.sqrt(d2)
    s = SQRT5 * r / p.lengthscale
    return -(5.0 * p.signal_variance / (3.0 * p.lengthscale**2)) * (1.0 + s) * np.exp(-s)


@dataclass(frozen=True)
class GpModel:
    params: KernelParams
    X_train: np.ndarray
    alpha: np.ndarray
    chol_L: np.ndarray

    @property
    def n(self) -> int:
        return 0 if self.X_train is None else self.X_train.shape[0]

    @property
    def dim(self) -> int | None:
        return None if self.X_train is None else self.X_train.shape[1]


def posterior(ds: OfflineDataset | None, p: KernelParams) -> GpModel:
    """Fit alpha = (K + noise*I)^-1 (z - mean) with the jitter escalation policy.

    An empty/None dataset yields the prior: posterior_mean returns p.mean.
    """
    if ds is None or ds.n == 0:
        return GpModel(p, None, None, None)
    K = kernel_matrix(p, ds.X, ds.X)
    L = cholesky_factor(K + p.noise_variance * np.eye(ds.n))
    alpha = cholesky_solve(L, ds.z - p.mean)
    return GpModel(p, ds.X.copy(), alpha, L)


def _kstar(g: GpModel, X: np.ndarray) -> np.ndarray:
    return kernel_matrix(g.params, X, g.X_train)


def posterior_mean(g: GpModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(posterior_mean_batch(g, x[None, :])[0])


def posterior_mean_batch(g: GpModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if g.X_train is None:
        return np.full(X.shape[0], g.params.mean)
    if X.shape[1] != g.dim:
        raise DimensionMismatch(f"query dim {X.shape[1]} != train dim {g.dim}")
    return g.params.mean + _kstar(g, X) @ g.alpha


def posterior_var(g: GpModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(posterior_var_batch(g, x[None, :])[0])


def posterior_var_batch(g: GpModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if g.X_train is None:
        return np.full(X.shape[0], g.params.signal_variance)
    if X.shape[1] != g.dim:
        raise DimensionMismatch(f"query dim {X.shape[1]} != train dim {g.dim}")
    Ks = _kstar(g, X)
    V = cholesky_solve(g.chol_L, Ks.T)
    var = g.params.signal_variance - np.sum(Ks * V.T, axis=1)
    worst = var.min() if var.size else 0.0
    if worst < -1e-8:
        log.warning("posterior variance clamped from %g", worst)
    return np.maximum(var, 0.0)


def posterior_mean_grad(g: GpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    return posterior_mean_grad_batch(g, x[None, :])[0]


def posterior_mean_grad_batch(g: GpModel, X: np.ndarray) -> np.ndarray:
    """Rows of grad_x mu at each query: sum_j alpha_j grad_x k(x, x_j)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if g.X_train is None:
        return np.zeros_like(X)
    if X.shape[1] != g.dim:
        raise DimensionMismatch(f"query dim {X.shape[1]} != train dim {g.dim}")
    d2 = _sqdist(X, g.X_train)
    K = kernel_matrix(g.params, X, g.X_train)
    W = _grad_weights(g.params, K, d2) * g.alpha[None, :]
    # grad_i = sum_j W_ij (x_i - x_j)
    return X * W.sum(axis=1)[:, None] - W @ g.X_train


def ucb(g: GpModel, x: np.ndarray, beta: float) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(ucb_batch(g, x[None, :], beta)[0])


def ucb_batch(g: GpModel, X: np.ndarray, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return posterior_mean_batch(g, X) + beta * np.sqrt(posterior_var_batch(g, X))


def ucb_grad_batch(g: GpModel, X: np.ndarray, beta: float) -> np.ndarray:
    """grad mu + beta * grad var / (2 sqrt var); sqrt term dropped below var 1e-12."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    gm = posterior_mean_grad_batch(g, X)
    if beta == 0 or g.X_train is None:
        return gm
    d2 = _sqdist(X, g.X_train)
    Ks = kernel_matrix(g.params, X, g.X_train)
    C = cholesky_solve(g.chol_L, Ks.T)  # n_train x n_query
    # grad var_i = -2 sum_j C_ji grad_x k(x_i, x_j)
    W = _grad_weights(g.params, Ks, d2) * C.T
    gvar = -2.0 * (X * W.sum(axis=1)[:, None] - W @ g.X_train)
    var = posterior_var_batch(g, X)
    safe = var > 1e-12
    scale = np.where(safe, beta / (2.0 * np.sqrt(np.where(safe, var, 1.0))), 0.0)
    return gm + scale[:, None] * gvar


def log_marginal_likelihood(ds: OfflineDataset, p: KernelParams) -> float:
    K = kernel_matrix(p, ds.X, ds.X)
    L = cholesky_factor(K + p.noise_variance * np.eye(ds.n))
    resid = ds.z - p.mean
    alpha = cholesky_solve(L, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * resid @ alpha - 0.5 * logdet - 0.5 * ds.n * np.log(2.0 * np.pi))


def fit_hyperparams(ds: OfflineDataset, grid: list[KernelParams]) -> KernelParams:
    """Grid point maximizing the Gaussian marginal log-likelihood; ties -> first."""
    if not grid:
        raise EmptyGrid("hyperparameter grid is empty")
    best, best_mll = None, -np.inf
    for p in grid:
        mll = log_marginal_likelihood(ds, p)
        if mll > best_mll:
            best, best_mll = p, mll
    return best


def default_grid(
    base: KernelParams, factors=(0.25, 0.5, 1.0, 2.0, 4.0)
) -> list[KernelParams]:
    """Small log-spaced grid of (lengthscale, signal variance) around base."""
    grid = []
    for fl in factors:
        for fv in factors:
            grid.append(
                replace(
                    base,
                    lengthscale=base.lengthscale * fl,
                    signal_variance=base.signal_variance * fv,
                )
            )
    return grid
