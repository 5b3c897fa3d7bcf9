"""Weighted k-nearest-neighbour classification over unit embeddings.

Neighbours are ranked by cosine similarity; each of the top k votes for its
label with weight exp(similarity / tau). Used to score both backbone
(canonical) and projection-head representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import EmbeddingDataset
from .errors import ContractError
from .nn import ProjectionHead, forward_project
from .validation import check_labels, check_unit_rows


@dataclass
class KnnConfig:
    k: int = 200
    tau: float = 0.1

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.tau <= 0:
            raise ContractError("tau must be positive")


def _knn_predict_batch(train_z: np.ndarray, train_y: np.ndarray,
                       queries: np.ndarray, cfg: KnnConfig,
                       n_classes: int) -> np.ndarray:
    n = train_z.shape[0]
    k = min(cfg.k, n)
    sims = queries @ train_z.T
    # stable sort on -sims keeps the lowest train index first among ties
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top_sims = np.take_along_axis(sims, order, axis=1)
    weights = np.exp(top_sims / cfg.tau)
    top_labels = train_y[order]
    scores = np.zeros((queries.shape[0], n_classes))
    for c in range(n_classes):
        scores[:, c] = np.where(top_labels == c, weights, 0.0).sum(axis=1)
    return scores / scores.sum(axis=1, keepdims=True)


def knn_predict(train_z: np.ndarray, train_y, query_z: np.ndarray,
                cfg: KnnConfig, n_classes: int | None = None) -> np.ndarray:
    """Class probabilities for one query from its exponentially weighted neighbours."""
    train_z = check_unit_rows(train_z, "train_z")
    if train_z.shape[0] < 1:
        raise ContractError("training set is empty")
    if n_classes is None:
        n_classes = int(np.max(train_y)) + 1
    train_y = check_labels(train_y, n_classes, "train_y")
    query = np.asarray(query_z, dtype=np.float64)
    if query.ndim != 1 or query.size != train_z.shape[1]:
        raise ContractError("query_z must be a vector matching the training dimension")
    return _knn_predict_batch(train_z, train_y, query[None, :], cfg, n_classes)[0]


def evaluate_knn(train_ds: EmbeddingDataset, eval_ds: EmbeddingDataset,
                 cfg: KnnConfig, head: ProjectionHead | None = None) -> float:
    """Top-1 accuracy of the weighted kNN classifier on canonical embeddings.

    With ``head`` given, both splits are projected through it first; otherwise
    the backbone-space canonical embeddings are scored directly.
    """
    if train_ds.labels is None or eval_ds.labels is None:
        raise ContractError("kNN evaluation requires labelled splits")
    if train_ds.n_items < 1:
        raise ContractError("training split is empty")
    train_z = train_ds.canonical.astype(np.float64)
    eval_z = eval_ds.canonical.astype(np.float64)
    if head is not None:
        train_z = forward_project(head, train_ds.canonical).astype(np.float64)
        eval_z = forward_project(head, eval_ds.canonical).astype(np.float64)
    n_classes = max(train_ds.n_classes, 1)
    probs = _knn_predict_batch(train_z, train_ds.labels.astype(np.int64),
                               eval_z, cfg, n_classes)
    return float(np.mean(np.argmax(probs, axis=1) == eval_ds.labels))
