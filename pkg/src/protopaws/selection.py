"""Unsupervised prototype selection and its coverage benchmark.

The main strategy clusters the canonical unit embeddings with k-means
(k = labelling budget, best of several restarts) and labels the item nearest
each centroid by cosine similarity. A density-based baseline ("USL-lite")
picks the densest point per cluster and then trades density against diversity
for a few regularization rounds. Random baselines and a class-coverage
counter round out the module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import EmbeddingDataset
from .errors import ContractError
from .validation import as_float_matrix, check_index_bounds


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    wcss: float


@dataclass
class SelectionReport:
    method: str
    budget: int
    seed: int
    indices: list[int]
    classes_covered: int

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method, "budget": self.budget, "seed": self.seed,
            "indices": self.indices, "classes_covered": self.classes_covered,
        }, sort_keys=True)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] + (C * C).sum(axis=1)[None, :] - 2.0 * X @ C.T
    return np.maximum(d, 0.0)


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each next center sampled with probability
    proportional to its squared distance to the nearest chosen center."""
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[j] = X[rng.integers(n)]
        else:
            r = rng.random() * total
            centroids[j] = X[np.searchsorted(np.cumsum(closest), r)]
        closest = np.minimum(closest, _sq_dists(X, centroids[j:j + 1])[:, 0])
    return centroids


def _wcss(X: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    return float(((X - centroids[assignments]) ** 2).sum())


def _lloyd_once(X: np.ndarray, k: int, max_iter: int,
                rng: np.random.Generator) -> KMeansResult:
    centroids = _kmeans_pp_init(X, k, rng)
    assignments = np.argmin(_sq_dists(X, centroids), axis=1)
    prev = _wcss(X, centroids, assignments)
    for _ in range(max_iter):
        for j in range(k):
            members = assignments == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
            else:
                # reseed an empty cluster to the point farthest from its centroid
                dists = ((X - centroids[assignments]) ** 2).sum(axis=1)
                centroids[j] = X[int(np.argmax(dists))]
                assignments[int(np.argmax(dists))] = j
        new_assignments = np.argmin(_sq_dists(X, centroids), axis=1)
        cur = _wcss(X, centroids, new_assignments)
        assert cur <= prev * (1 + 1e-12) + 1e-12, "k-means objective increased"
        if np.array_equal(new_assignments, assignments):
            assignments = new_assignments
            prev = cur
            break
        assignments = new_assignments
        prev = cur
    return KMeansResult(centroids, assignments, prev)


def lloyd_kmeans(X: np.ndarray, k: int, n_init: int = 10, max_iter: int = 100,
                 rng: np.random.Generator | None = None) -> KMeansResult:
    """Best-of-n_init Lloyd's algorithm with k-means++ seeding.

    The within-cluster sum of squares is asserted non-increasing across
    iterations; empty clusters are reseeded to the point currently farthest
    from its centroid.
    """
    X = as_float_matrix(X, "X", dtype=np.float64)
    n = X.shape[0]
    if not (1 <= k <= n):
        raise ContractError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = rng or np.random.default_rng()
    best = None
    for _ in range(max(1, n_init)):
        result = _lloyd_once(X, k, max_iter, rng)
        if best is None or result.wcss < best.wcss:
            best = result
    return best


def _nearest_by_cosine(X: np.ndarray, centroid: np.ndarray, taken: set) -> int:
    sims = X @ centroid
    for idx in np.lexsort((np.arange(X.shape[0]), -sims)):
        if int(idx) not in taken:
            return int(idx)
    raise ContractError("no untaken point left for centroid")


def simple_kmeans_select(ds: EmbeddingDataset, budget: int,
                         rng: np.random.Generator, n_init: int = 10) -> np.ndarray:
    """Cluster canonical embeddings into ``budget`` clusters; pick the item with
    the largest cosine similarity to each centroid (ties to the lowest index,
    duplicates resolved by the next-nearest untaken item)."""
    if budget > ds.n_items:
        raise ContractError(f"budget {budget} exceeds dataset size {ds.n_items}")
    X = ds.canonical.astype(np.float64)
    result = lloyd_kmeans(X, budget, n_init=n_init, rng=rng)
    taken: set = set()
    selected = []
    for j in range(budget):
        idx = _nearest_by_cosine(X, result.centroids[j], taken)
        taken.add(idx)
        selected.append(idx)
    return np.asarray(selected, dtype=np.int64)


def _density(X: np.ndarray, k_density: int) -> np.ndarray:
    """Inverse mean cosine distance to each point's k nearest neighbours."""
    n = X.shape[0]
    k = min(k_density, n - 1)
    if k < 1:
        return np.ones(n)
    dist = 1.0 - X @ X.T
    np.fill_diagonal(dist, np.inf)
    nearest = np.sort(dist, axis=1)[:, :k]
    return 1.0 / (nearest.mean(axis=1) + 1e-12)


def usl_lite_select(ds: EmbeddingDataset, budget: int,
                    rng: np.random.Generator, k_density: int = 10,
                    reg_iters: int = 3, lam: float = 0.5,
                    n_init: int = 10) -> np.ndarray:
    """Density-first selection: per k-means cluster take the densest point,
    then regularize the set by trading density against inverse distance to the
    other selected points."""
    if budget > ds.n_items:
        raise ContractError(f"budget {budget} exceeds dataset size {ds.n_items}")
    X = ds.canonical.astype(np.float64)
    result = lloyd_kmeans(X, budget, n_init=n_init, rng=rng)
    density = _density(X, k_density)
    clusters = [np.flatnonzero(result.assignments == j) for j in range(budget)]
    selected = np.array([c[np.argmax(density[c])] for c in clusters])
    for _ in range(reg_iters):
        for j, members in enumerate(clusters):
            others = np.delete(selected, j)
            if others.size:
                inv = 1.0 / (1.0 - X[members] @ X[others].T + 1e-12)
                utility = density[members] - lam * inv.sum(axis=1)
            else:
                utility = density[members]
            selected[j] = members[int(np.argmax(utility))]
    return np.sort(selected).astype(np.int64)


def random_select(ds: EmbeddingDataset, budget: int, mode: str,
                  rng: np.random.Generator) -> np.ndarray:
    """Uniform or class-stratified random baseline."""
    if budget > ds.n_items:
        raise ContractError(f"budget {budget} exceeds dataset size {ds.n_items}")
    if mode == "uniform":
        return np.sort(rng.choice(ds.n_items, size=budget, replace=False)).astype(np.int64)
    if mode != "class_stratified":
        raise ContractError(f"unknown mode {mode!r}")
    if ds.labels is None:
        raise ContractError("class_stratified selection requires labels")
    n_classes = ds.n_classes
    if budget % n_classes:
        raise ContractError(f"budget {budget} not divisible by {n_classes} classes")
    quota = budget // n_classes
    picks = []
    for c in range(n_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size < quota:
            raise ContractError(f"class {c} has {members.size} items, fewer than quota {quota}")
        picks.append(rng.choice(members, size=quota, replace=False))
    return np.sort(np.concatenate(picks)).astype(np.int64)


def class_coverage(indices, labels) -> int:
    """Number of distinct classes among the selected items."""
    labels = np.asarray(labels)
    idx = check_index_bounds(indices, labels.shape[0], "indices")
    if idx.size == 0:
        return 0
    return int(np.unique(labels[idx]).size)


SELECTION_METHODS = ("simple_kmeans", "usl_lite", "random", "random_stratified")


def select_prototypes(ds: EmbeddingDataset, method: str, budget: int,
                      rng: np.random.Generator, **kwargs) -> np.ndarray:
    if method == "simple_kmeans":
        return simple_kmeans_select(ds, budget, rng, **kwargs)
    if method == "usl_lite":
        return usl_lite_select(ds, budget, rng, **kwargs)
    if method == "random":
        return random_select(ds, budget, "uniform", rng)
    if method == "random_stratified":
        return random_select(ds, budget, "class_stratified", rng)
    raise ContractError(f"unknown selection method {method!r}")


def coverage_bench(ds: EmbeddingDataset, budget: int, seeds,
                   methods=("simple_kmeans", "usl_lite", "random")) -> list[SelectionReport]:
    """Run each method once per seed and report class coverage."""
    if ds.labels is None:
        raise ContractError("coverage benchmark requires labels")
    reports = []
    for method in methods:
        for seed in seeds:
            rng = np.random.default_rng(seed)
            idx = select_prototypes(ds, method, budget, rng)
            reports.append(SelectionReport(
                method, budget, int(seed), [int(i) for i in idx],
                class_coverage(idx, ds.labels)))
    return reports
