"""Clustering: full-covariance Gaussian mixture EM, k-means and PCA for the
baseline, and spectral-angle cluster merging.

The mixture keeps full covariance matrices so correlated latent features can
still be separated; covariances pick up a small relative ridge each M-step
to stay positive definite at embedding dimensions up to a few dozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .core import PixelMatrix, pairwise_spectral_angles, scatter_labels
from .errors import NumericalError

COV_REG_REL = 1e-6
LL_REL_TOL = 1e-5
GMM_MAX_ITER = 500
WEIGHT_COLLAPSE = 1e-8
MAX_RESEEDS = 3
KMEANS_MAX_ITER = 300


@dataclass
class GmmModel:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covariances: np.ndarray  # (k, d, d)
    log_likelihood_trace: list[float] = field(default_factory=list)
    # reseeding a collapsed component is a recovery event and may reset the
    # monotonic growth of the trace
    reseeds: int = 0

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]


@dataclass
class ClusterMap:
    """Per-pixel labels on the raster (-1 = masked) plus per-cluster stats.

    ``cluster_means`` live in the preprocessed spectral space, not the
    embedding space, so merging and CSV export speak in spectra.
    """

    labels: np.ndarray
    k: int
    cluster_means: np.ndarray
    cluster_sizes: np.ndarray
    palette: list[tuple[int, int, int]] | None = None

    def labels_for(self, origin: np.ndarray) -> np.ndarray:
        """Labels aligned with PixelMatrix rows given its origin index."""
        return self.labels[origin[:, 0], origin[:, 1]]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(axis=1)[:, None] - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centers with D^2 sampling."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = _sq_dists(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[j] = X[idx]
        d2 = np.minimum(d2, _sq_dists(X, centers[j:j + 1])[:, 0])
    return centers


def _log_gaussians(Z: np.ndarray, model: GmmModel) -> np.ndarray:
    """(p, k) log density of each point under each component."""
    p, d = Z.shape
    out = np.empty((p, model.k))
    for q in range(model.k):
        try:
            L = np.linalg.cholesky(model.covariances[q])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"component {q} covariance is not positive definite") from exc
        diff = Z - model.means[q]
        sol = solve_triangular(L, diff.T, lower=True)
        maha = (sol * sol).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, q] = -0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)
    return out


def _e_step(Z: np.ndarray, model: GmmModel) -> tuple[np.ndarray, float]:
    """Responsibilities (log space) and total log-likelihood."""
    log_prob = _log_gaussians(Z, model) + np.log(model.weights)[None, :]
    mx = log_prob.max(axis=1, keepdims=True)
    log_norm = mx[:, 0] + np.log(np.exp(log_prob - mx).sum(axis=1))
    return log_prob - log_norm[:, None], float(log_norm.sum())


def _regularize(cov: np.ndarray, rel: float = COV_REG_REL) -> np.ndarray:
    mean_diag = float(np.trace(cov)) / cov.shape[0]
    add = rel * mean_diag if mean_diag > 0.0 else 1e-12
    return cov + add * np.eye(cov.shape[0])


def gmm_fit(Z: np.ndarray, k: int, seed: int, max_iter: int = GMM_MAX_ITER,
            rel_tol: float = LL_REL_TOL) -> GmmModel:
    """Fit a k-component full-covariance Gaussian mixture by EM.

    Init: k-means++ centers with a shared isotropic covariance and uniform
    weights. Stops when the log-likelihood gain drops below ``rel_tol``
    (relative) or after ``max_iter`` iterations. A component whose weight
    collapses below 1e-8 is reseeded from the most orphaned point, at most
    three times.
    """
    Z = np.asarray(Z, dtype=np.float64)
    p, d = Z.shape
    if p <= k:
        raise ValueError(f"need more points than components (p={p}, k={k})")
    rng = np.random.default_rng(seed)
    means = _kmeans_pp(Z, k, rng)
    sigma2 = float(_sq_dists(Z, means).min(axis=1).mean()) / d
    if sigma2 <= 0.0:
        sigma2 = max(float(Z.var(axis=0).mean()), 1e-12)
    cov0 = _regularize(sigma2 * np.eye(d))
    model = GmmModel(
        weights=np.full(k, 1.0 / k),
        means=means,
        covariances=np.repeat(cov0[None, :, :], k, axis=0),
    )

    global_var = max(float(Z.var(axis=0).mean()), 1e-12)
    reseeds = 0
    prev_ll = None
    for _ in range(max_iter):
        log_resp, ll = _e_step(Z, model)
        model.log_likelihood_trace.append(ll)
        if prev_ll is not None and (ll - prev_ll) < rel_tol * max(1.0, abs(prev_ll)):
            break
        prev_ll = ll

        resp = np.exp(log_resp)
        nq = resp.sum(axis=0)
        collapsed = np.nonzero(nq / p < WEIGHT_COLLAPSE)[0]
        if collapsed.size:
            reseeds += collapsed.size
            model.reseeds = reseeds
            if reseeds > MAX_RESEEDS:
                raise NumericalError(
                    f"{reseeds} component reseeds exceeded the limit of {MAX_RESEEDS}; "
                    "reduce k or check the embedding"
                )
            orphan_rank = np.argsort(resp.max(axis=1))
            for j, q in enumerate(collapsed):
                model.means[q] = Z[orphan_rank[j]]
                model.covariances[q] = _regularize(global_var * np.eye(d))
                model.weights[q] = 1.0 / k
            model.weights /= model.weights.sum()
            prev_ll = None  # reseed invalidates the monotonicity reference
            continue

        model.weights = nq / p
        model.means = (resp.T @ Z) / nq[:, None]
        for q in range(k):
            diff = Z - model.means[q]
            cov = (diff * resp[:, q:q + 1]).T @ diff / nq[q]
            model.covariances[q] = _regularize(0.5 * (cov + cov.T))
    return model


def gmm_responsibilities(model: GmmModel, Z: np.ndarray) -> np.ndarray:
    log_resp, _ = _e_step(np.asarray(Z, dtype=np.float64), model)
    return np.exp(log_resp)


def gmm_assign(model: GmmModel, Z: np.ndarray) -> np.ndarray:
    """Hard labels: responsibility argmax, ties to the lowest component index."""
    log_resp, _ = _e_step(np.asarray(Z, dtype=np.float64), model)
    return log_resp.argmax(axis=1).astype(np.int32)


def kmeans_fit(X: np.ndarray, k: int, seed: int, max_iter: int = KMEANS_MAX_ITER,
               return_trace: bool = False):
    """Lloyd iterations from a k-means++ start.

    Runs until no label changes or ``max_iter``; an emptied cluster is
    reseeded to the point farthest from its assigned center. Returns
    (centers, labels), plus the per-iteration inertia trace when asked.
    """
    X = np.asarray(X, dtype=np.float64)
    p = X.shape[0]
    if p <= k:
        raise ValueError(f"need more points than clusters (p={p}, k={k})")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, k, rng)
    labels = np.full(p, -1, dtype=np.int32)
    trace: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        new_labels = d2.argmin(axis=1).astype(np.int32)
        assigned = d2[np.arange(p), new_labels]
        for q in range(k):
            if not np.any(new_labels == q):
                far = int(assigned.argmax())
                centers[q] = X[far]
                new_labels[far] = q
                assigned[far] = 0.0
        trace.append(float(assigned.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for q in range(k):
            members = X[labels == q]
            if members.shape[0]:
                centers[q] = members.mean(axis=0)
    if return_trace:
        return centers, labels, trace
    return centers, labels


def pca(X: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered SVD principal components and the projected data.

    Components are orthonormal rows ordered by decreasing variance, with a
    deterministic sign: the largest-magnitude entry of each is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    p, w = X.shape
    if not 1 <= n_components <= min(p, w):
        raise ValueError(f"n_components must be in [1, {min(p, w)}], got {n_components}")
    centered = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:n_components].copy()
    for row in components:
        pivot = int(np.abs(row).argmax())
        if row[pivot] < 0.0:
            row *= -1.0
    return components, centered @ components.T


def build_cluster_map(labels: np.ndarray, matrix: PixelMatrix, rows: int, cols: int,
                      palette: list[tuple[int, int, int]] | None = None) -> ClusterMap:
    """Assemble a ClusterMap from per-row labels of a PixelMatrix.

    Empty label ids are dropped and the rest renumbered densely, so ``k``
    counts the clusters that actually own pixels. Cluster means are taken
    over the matrix spectra.
    """
    labels = np.asarray(labels)
    if labels.shape != (matrix.p,):
        raise ValueError("labels must have one entry per pixel-matrix row")
    if np.any(labels < 0):
        raise ValueError("pixel-matrix rows cannot carry the masked sentinel")
    present = np.unique(labels)
    remap = {int(old): new for new, old in enumerate(present)}
    dense = np.array([remap[int(v)] for v in labels], dtype=np.int32)
    kk = present.size
    means = np.empty((kk, matrix.w))
    sizes = np.empty(kk, dtype=np.int64)
    for q in range(kk):
        members = dense == q
        sizes[q] = int(members.sum())
        means[q] = matrix.spectra[members].mean(axis=0)
    raster = scatter_labels(dense, matrix.origin, rows, cols, fill=-1)
    return ClusterMap(labels=raster, k=kk, cluster_means=means, cluster_sizes=sizes,
                      palette=palette)


def merge_clusters(cmap: ClusterMap, matrix: PixelMatrix, angle_threshold: float,
                   trace: list | None = None) -> ClusterMap:
    """Iteratively merge the closest pair of clusters by mean-spectrum angle.

    Means are recomputed from the matrix spectra; each merge replaces a pair
    with its size-weighted mean. Merging repeats while the smallest pairwise
    angle is strictly below ``angle_threshold`` (so a threshold of 0 is the
    identity), with ties broken on the lowest (i, j). Labels are renumbered
    densely; surviving clusters keep their palette colors.
    """
    if angle_threshold < 0.0:
        raise ValueError("angle threshold must be nonnegative")
    flat = cmap.labels_for(matrix.origin)
    if np.any(flat < 0):
        raise ValueError("cluster map does not label every pixel-matrix row")

    ids = [int(v) for v in np.unique(flat)]
    sizes = {i: int(np.count_nonzero(flat == i)) for i in ids}
    means = {i: matrix.spectra[flat == i].mean(axis=0) for i in ids}
    labels = flat.copy()

    while len(ids) > 1:
        stacked = np.stack([means[i] for i in ids])
        angles = pairwise_spectral_angles(stacked)
        iu, ju = np.triu_indices(len(ids), k=1)
        flat_angles = angles[iu, ju]
        pos = int(flat_angles.argmin())  # argmin takes the first = lowest (i, j)
        if not flat_angles[pos] < angle_threshold:
            break
        a, b = ids[iu[pos]], ids[ju[pos]]
        if trace is not None:
            trace.append({"merged": [a, b], "angle": float(flat_angles[pos])})
        total = sizes[a] + sizes[b]
        means[a] = (sizes[a] * means[a] + sizes[b] * means[b]) / total
        sizes[a] = total
        labels[labels == b] = a
        del means[b], sizes[b]
        ids.remove(b)

    remap = {old: new for new, old in enumerate(ids)}
    dense = np.array([remap[int(v)] for v in labels], dtype=np.int32)
    new_means = np.stack([means[i] for i in ids])
    new_sizes = np.array([sizes[i] for i in ids], dtype=np.int64)
    palette = None
    if cmap.palette is not None:
        palette = [tuple(cmap.palette[i]) for i in ids]
    rows, cols = cmap.labels.shape
    raster = scatter_labels(dense, matrix.origin, rows, cols, fill=-1)
    return ClusterMap(labels=raster, k=len(ids), cluster_means=new_means,
                      cluster_sizes=new_sizes, palette=palette)
