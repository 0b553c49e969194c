"""k-means++ seeding followed by Lloyd iterations."""
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ContractError
from .vectorlab import pairwise_sq_distances


@dataclass
class ClusteringResult:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    def assignments(self, ids):
        return {str(i): int(c) for i, c in zip(ids, self.labels)}


def _inertia(X, centroids, labels):
    diff = X - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeanspp_seed(X, k, rng):
    """Indices of ``k`` seeds: first uniform, then each sampled proportional to squared distance."""
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = pairwise_sq_distances(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # fewer distinct points than k: fall back to an unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(unused))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, pairwise_sq_distances(X, X[idx:idx + 1])[:, 0])
    return np.asarray(chosen)


def kmeans_pp(points, k, seed=0, max_iters=100):
    """Cluster ``points`` into ``k`` groups.

    Lloyd iterations run until assignments stop changing or ``max_iters``
    is hit. An empty cluster is re-seeded with the point farthest from its
    current centroid, unless every point already sits on its centroid.
    ``inertia_history`` records the objective after every iteration and
    never increases.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ContractError("points must be a non-empty 2-d array")
    if k < 1:
        raise ContractError("k must be >= 1")
    if k > len(X):
        raise ContractError(f"k={k} exceeds the number of points ({len(X)})")
    rng = np.random.default_rng(seed)
    centroids = X[kmeanspp_seed(X, k, rng)].copy()
    labels = np.argmin(pairwise_sq_distances(X, centroids), axis=1)
    history = [_inertia(X, centroids, labels)]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = X[members].mean(axis=0)
        for c in range(k):
            if not np.any(labels == c):
                d2 = np.einsum("ij,ij->i", X - centroids[labels], X - centroids[labels])
                far = int(np.argmax(d2))
                if d2[far] == 0.0:
                    # every point sits on its centroid; a split would be arbitrary
                    continue
                centroids[c] = X[far]
                labels[far] = c
        d_new = pairwise_sq_distances(X, centroids)
        new_labels = np.argmin(d_new, axis=1)
        # keep current assignment on exact distance ties so the objective cannot rise
        rows = np.arange(len(X))
        keep = d_new[rows, labels] <= d_new[rows, new_labels]
        new_labels = np.where(keep, labels, new_labels)
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        history.append(_inertia(X, centroids, labels))
        if not changed:
            break
    for c in range(k):
        members = labels == c
        if members.any():
            centroids[c] = X[members].mean(axis=0)
    inertia = _inertia(X, centroids, labels)
    history.append(inertia)
    return ClusteringResult(k=k, labels=labels, centroids=centroids, inertia=inertia, n_iter=n_iter,
                            inertia_history=history)


def best_of_seeds(points, k, seeds, max_iters=100):
    best = None
    for s in seeds:
        res = kmeans_pp(points, k, seed=s, max_iters=max_iters)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


class KMeansPlusPlus(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`kmeans_pp` with best-of-``n_init`` restarts."""

    def __init__(self, n_clusters=8, n_init=1, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        seeds = np.random.SeedSequence(self.random_state).generate_state(self.n_init)
        res = best_of_seeds(X, self.n_clusters, [int(s) for s in seeds], self.max_iter)
        self.cluster_centers_ = res.centroids
        self.labels_ = res.labels
        self.inertia_ = res.inertia
        self.n_iter_ = res.n_iter
        self.result_ = res
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.argmin(pairwise_sq_distances(X, self.cluster_centers_), axis=1)
