"""Ambiguous-sample mining: z-score, PCA, k-means, silhouette ranking.

The pipeline flattens preprocessed images into a feature matrix,
z-scores per feature, reduces with PCA, clusters with k-means, and
ranks samples by how poorly they sit in their cluster (silhouette
ascending, centroid distance breaking ties). The worst-ranked fraction
is the ambiguous subset handed to the few-shot pathway.

Everything here is deterministic given the seed, and hand-rolled so the
empty-cluster and tie-break policies are exactly the documented ones.
"""

import dataclasses
import math

import numpy as np

from .errors import InvalidInputError, ShapeError
from .params import make_rng


@dataclasses.dataclass
class FeatureMatrix:
    """Z-scored flattened samples plus the column degeneracy report."""

    ids: list
    data: np.ndarray
    degenerate_columns: np.ndarray

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


def zscore_flatten(images, ids=None):
    """Flatten uniform-shape images and z-score each feature column.

    Zero-variance columns are centered (hence exactly zero) and listed
    in ``degenerate_columns`` instead of raising.
    """
    if not images:
        raise InvalidInputError("no images to flatten")
    arrays = [np.asarray(im, dtype=np.float64) for im in images]
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise ShapeError(f"image {i} shape {a.shape} != {shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError(f"image {i} contains non-finite values")
    flat = np.stack([a.ravel() for a in arrays])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    degenerate = np.nonzero(std == 0.0)[0]
    data = (flat - mean) / np.where(std == 0.0, 1.0, std)
    if ids is None:
        ids = list(range(len(arrays)))
    return FeatureMatrix(ids=list(ids), data=data, degenerate_columns=degenerate)


def pca(data, k):
    """Project onto the top-k principal directions.

    Returns (projected N x k, explained-variance fractions). Picks the
    covariance or Gram eigenproblem depending on which side is smaller,
    so wide matrices (D much larger than N) stay cheap. Component signs
    are fixed so each direction's largest-magnitude entry is positive.
    """
    x = np.asarray(getattr(data, "data", data), dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise InvalidInputError(f"k={k} out of range [1, min(N={n}, D={d})]")
    centered = x - x.mean(axis=0)
    total_var = float(np.sum(centered ** 2)) / n
    if total_var == 0.0:
        return np.zeros((n, k)), np.zeros(k)

    if d <= n:
        cov = centered.T @ centered / n
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][:k]
        components = eigvecs[:, order]
        top = eigvals[order]
    else:
        gram = centered @ centered.T / n
        eigvals, eigvecs = np.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1][:k]
        top = eigvals[order]
        components = np.empty((d, k))
        for j, idx in enumerate(order):
            lam = max(eigvals[idx], 0.0)
            if lam <= 0.0:
                components[:, j] = 0.0
                continue
            components[:, j] = centered.T @ eigvecs[:, idx] / np.sqrt(n * lam)

    for j in range(k):
        col = components[:, j]
        peak = np.argmax(np.abs(col))
        if col[peak] < 0:
            components[:, j] = -col
    projected = centered @ components
    fractions = np.clip(top, 0.0, None) / total_var
    return projected, fractions


@dataclasses.dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list
    converged: bool
    n_iter: int
    silhouette: np.ndarray


def _sq_dists(x, centroids):
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plusplus_init(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with a centroid; any pick works
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=closest / total))
        centroids[j] = x[pick]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(data, k, seed=0, max_iters=100):
    """Lloyd's algorithm with seeded k-means++ initialization.

    Empty clusters are re-seeded at the point farthest from its current
    centroid, which strictly reduces inertia. Assignment ties go to the
    lowest centroid index.
    """
    x = np.asarray(getattr(data, "data", data), dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise InvalidInputError(f"k={k} out of range [1, N={n}]")
    rng = make_rng(seed, 7001)
    centroids = _plusplus_init(x, k, rng)

    assignments = None
    history = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        dists = _sq_dists(x, centroids)
        new_assign = np.argmin(dists, axis=1)

        # fill any empty cluster with the worst-placed point
        for j in range(k):
            if not np.any(new_assign == j):
                worst = int(np.argmax(dists[np.arange(n), new_assign]))
                centroids[j] = x[worst]
                dists = _sq_dists(x, centroids)
                new_assign = np.argmin(dists, axis=1)

        history.append(float(dists[np.arange(n), new_assign].sum()))
        if assignments is not None and np.array_equal(new_assign, assignments):
            converged = True
            assignments = new_assign
            break
        assignments = new_assign
        for j in range(k):
            members = x[assignments == j]
            if len(members):
                centroids[j] = members.mean(axis=0)

    dists = _sq_dists(x, centroids)
    assignments = np.argmin(dists, axis=1)
    inertia = float(dists[np.arange(n), assignments].sum())
    scores = silhouette(x, assignments) if len(np.unique(assignments)) > 1 else None
    return ClusterModel(k=k, centroids=centroids, assignments=assignments,
                        inertia=inertia, inertia_history=history,
                        converged=converged, n_iter=n_iter, silhouette=scores)


def silhouette(data, assignments):
    """Per-sample silhouette scores s = (b - a) / max(a, b).

    a is the mean distance to the sample's own cluster (excluding
    itself), b the smallest mean distance to any other cluster.
    Singleton-cluster members score 0 by convention.
    """
    x = np.asarray(getattr(data, "data", data), dtype=np.float64)
    assignments = np.asarray(assignments)
    labels = np.unique(assignments)
    if len(labels) < 2:
        raise InvalidInputError("silhouette needs at least 2 clusters")
    n = x.shape[0]
    dists = np.sqrt(np.maximum(_sq_dists(x, x), 0.0))
    scores = np.zeros(n)
    for i in range(n):
        own = assignments[i]
        mask_own = assignments == own
        n_own = int(mask_own.sum())
        if n_own == 1:
            continue
        a = dists[i, mask_own].sum() / (n_own - 1)
        b = min(dists[i, assignments == other].mean()
                for other in labels if other != own)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return scores


def select_ambiguous(model, data, fraction=0.10, ids=None):
    """The worst-fitting ceil(fraction * N) sample ids.

    Ranking is lexicographic: silhouette ascending, then distance to
    own centroid descending, then id ascending.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction {fraction} not in (0, 1]")
    x = np.asarray(getattr(data, "data", data), dtype=np.float64)
    n = x.shape[0]
    if ids is None:
        ids = getattr(data, "ids", None) or list(range(n))
    ids = list(ids)
    if len(ids) != n:
        raise ShapeError(f"{len(ids)} ids for {n} samples")
    scores = model.silhouette
    if scores is None:
        scores = silhouette(x, model.assignments)
    own_dist = np.sqrt(((x - model.centroids[model.assignments]) ** 2).sum(axis=1))
    order = np.lexsort((np.asarray(ids), -own_dist, scores))
    count = math.ceil(fraction * n)
    return [ids[i] for i in order[:count]]
