"""Signal-subspace dimension estimation from per-band noise regression.

The noise in each band is estimated by regressing that band on all others
(ridge-stabilized least squares); the signal subspace size d is then the
number of correlation-matrix eigendirections whose inclusion lowers the
projection MSE, i.e. directions where twice the projected noise power is
below the projected data power. The clustering stage uses k = 2d by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PixelMatrix
from .errors import NumericalError

RIDGE_REL = 1e-6


@dataclass
class NoiseEstimate:
    """Per-pixel noise residuals (p x w) and their band correlation matrix (w x w)."""

    residuals: np.ndarray
    noise_corr: np.ndarray


@dataclass
class SubspaceResult:
    d: int
    basis: np.ndarray  # w x d, orthonormal columns
    per_direction_cost: np.ndarray  # MSE deltas, one per eigendirection (descending eigenvalue)


def estimate_noise(matrix: PixelMatrix, ridge_rel: float = RIDGE_REL) -> NoiseEstimate:
    """Estimate additive noise by multiple regression of each band on the rest.

    For band i the residual is z_i - Z_{-i} beta_i with beta_i solving the
    ridge-regularized normal equations (tau = ridge_rel * mean Gram diagonal).
    Requires more pixels than bands.
    """
    X = matrix.spectra
    p, w = X.shape
    if p <= w:
        raise NumericalError(
            f"noise regression needs more pixels than bands (p={p}, w={w}); "
            "reduce the band count or supply more pixels"
        )
    gram = X.T @ X
    residuals = np.empty_like(X)
    idx = np.arange(w)
    for i in range(w):
        others = idx[idx != i]
        sub = gram[np.ix_(others, others)]
        tau = ridge_rel * np.trace(sub) / (w - 1)
        beta = np.linalg.solve(sub + tau * np.eye(w - 1), gram[others, i])
        residuals[:, i] = X[:, i] - X[:, others] @ beta
    noise_corr = residuals.T @ residuals / p
    noise_corr = 0.5 * (noise_corr + noise_corr.T)
    return NoiseEstimate(residuals=residuals, noise_corr=noise_corr)


def estimate_dimension(matrix: PixelMatrix, noise: NoiseEstimate) -> SubspaceResult:
    """Pick the subspace dimension minimizing projection MSE.

    Eigendecomposes the signal correlation (data correlation minus noise
    correlation, projected onto its PSD part) and keeps the directions where
    2 e'R_n e - e'R_y e < 0. d is floored at 1.
    """
    X = matrix.spectra
    p, w = X.shape
    ry = X.T @ X / p
    ry = 0.5 * (ry + ry.T)
    rn = 0.5 * (noise.noise_corr + noise.noise_corr.T)
    rx = ry - rn
    rx = 0.5 * (rx + rx.T)

    evals, evecs = np.linalg.eigh(rx)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)  # PSD projection
    evecs = evecs[:, order]

    cost = np.empty(w)
    for i in range(w):
        e = evecs[:, i]
        cost[i] = 2.0 * (e @ rn @ e) - (e @ ry @ e)
    d = max(1, int(np.count_nonzero(cost < 0.0)))
    return SubspaceResult(d=d, basis=evecs[:, :d].copy(), per_direction_cost=cost)


def cluster_count(d: int, override: int | None = None) -> int:
    """Default cluster count is twice the subspace dimension; an explicit
    user override wins."""
    if override is not None:
        if override < 1:
            raise ValueError("cluster count override must be at least 1")
        return int(override)
    if d < 1:
        raise ValueError("subspace dimension must be at least 1")
    return 2 * int(d)
