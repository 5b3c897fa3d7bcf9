"""Scikit-learn style wrappers so the training loops compose with the wider
ecosystem (``get_params`` / ``set_params`` / ``clone`` / pipelines).

Estimators accept either a plain (n, d) array, whose rows are normalized and
treated as single-view items, or a full :class:`EmbeddingDataset` with view
pools. Fitted attributes follow the trailing-underscore convention.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .dataset import EmbeddingDataset
from .errors import ContractError
from .knn import KnnConfig, _knn_predict_batch
from .nn import LarsState, forward_project, init_head, make_warmup_cosine
from .paws import (PawsConfig, PrototypeSet, predict_classes, smooth_labels,
                   train_paws)
from .selection import select_prototypes
from .validation import check_labels, normalize_rows
from .vmfsne import VmfSneConfig, pretrain_vmfsne


def _as_dataset(X, y=None, n_classes: int | None = None) -> EmbeddingDataset:
    if isinstance(X, EmbeddingDataset):
        return X
    Z = normalize_rows(np.asarray(X, dtype=np.float32), "X")
    labels = None
    if y is not None:
        y = np.asarray(y)
        labels = y.astype(np.int32)
        if n_classes is None:
            n_classes = int(labels.max()) + 1
    return EmbeddingDataset(Z, Z[:, None, :], np.zeros((Z.shape[0], 0, Z.shape[1]),
                            dtype=np.float32), labels, n_classes or 0)


def _check_fitted(est, attr: str):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet")



class VmfSneProjector(TransformerMixin, BaseEstimator):
    """Projection head fitted by neighbour-embedding pretraining; ``transform``
    maps embeddings into the projected unit sphere."""

    def __init__(self, hidden_dim=384, out_dim=512, perplexity=30.0, tau=0.1,
                 batch_size=512, epochs=20, start_lr=0.3, max_lr=6.4,
                 final_lr=0.064, warmup_frac=0.1, momentum=0.9,
                 weight_decay=1e-6, trust_coef=0.001, random_state=0):
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.perplexity = perplexity
        self.tau = tau
        self.batch_size = batch_size
        self.epochs = epochs
        self.start_lr = start_lr
        self.max_lr = max_lr
        self.final_lr = final_lr
        self.warmup_frac = warmup_frac
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.trust_coef = trust_coef
        self.random_state = random_state

    def fit(self, X, y=None):
        ds = _as_dataset(X)
        cfg = VmfSneConfig(perplexity=self.perplexity, tau=self.tau,
                           batch_size=self.batch_size, epochs=self.epochs)
        rng = np.random.default_rng(self.random_state)
        head = init_head(ds.dim, self.hidden_dim, self.out_dim, rng)
        state = LarsState.init(head, self.momentum, self.weight_decay, self.trust_coef)
        pool_n = ds.global_views.reshape(-1, ds.dim).shape[0]
        total = self.epochs * (pool_n // self.batch_size)
        sched = make_warmup_cosine(total, self.start_lr, self.max_lr,
                                   self.final_lr, self.warmup_frac)
        self.head_, self.history_ = pretrain_vmfsne(ds, head, cfg, state, sched, rng)
        return self

    def transform(self, X):
        _check_fitted(self, "head_")
        if isinstance(X, EmbeddingDataset):
            X = X.canonical
        return forward_project(self.head_, normalize_rows(np.asarray(X, dtype=np.float32)))


class PawsClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised prototype classifier; unlabelled rows carry y = -1."""

    def __init__(self, hidden_dim=384, out_dim=512, tau=0.1, sharpen_T=0.25,
                 loss_mode="pseudolabel", me_max=True, label_smoothing=0.1,
                 n_local=0, unlabelled_batch_size=512, epochs=50, start_lr=0.3,
                 max_lr=6.4, final_lr=0.064, warmup_frac=0.1, momentum=0.9,
                 weight_decay=1e-6, trust_coef=0.001, warm_start_head=None,
                 random_state=0):
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.tau = tau
        self.sharpen_T = sharpen_T
        self.loss_mode = loss_mode
        self.me_max = me_max
        self.label_smoothing = label_smoothing
        self.n_local = n_local
        self.unlabelled_batch_size = unlabelled_batch_size
        self.epochs = epochs
        self.start_lr = start_lr
        self.max_lr = max_lr
        self.final_lr = final_lr
        self.warmup_frac = warmup_frac
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.trust_coef = trust_coef
        self.warm_start_head = warm_start_head
        self.random_state = random_state

    def fit(self, X, y):
        y = np.asarray(y)
        labelled = y >= 0
        if not labelled.any():
            raise ContractError("PawsClassifier needs at least one labelled row (y >= 0)")
        self.classes_ = np.unique(y[labelled])
        n_classes = int(self.classes_.max()) + 1
        if isinstance(X, EmbeddingDataset):
            ds = X
            if ds.labels is None:
                ds = EmbeddingDataset(ds.canonical, ds.global_views, ds.local_views,
                                      np.where(labelled, y, 0).astype(np.int32), n_classes)
        else:
            ds = _as_dataset(X, np.where(labelled, y, 0), n_classes)
        proto_indices = np.flatnonzero(labelled)
        protos = PrototypeSet(proto_indices, y[labelled].astype(np.int64),
                              smooth_labels(y[labelled].astype(np.int64), n_classes, self.label_smoothing))
        cfg = PawsConfig(tau=self.tau, sharpen_T=self.sharpen_T,
                         loss_mode=self.loss_mode, me_max=self.me_max,
                         label_smoothing=self.label_smoothing,
                         unlabelled_batch_size=self.unlabelled_batch_size,
                         epochs=self.epochs, n_local=min(self.n_local, ds.n_local))
        rng = np.random.default_rng(self.random_state)
        if self.warm_start_head is not None:
            head = self.warm_start_head.copy()
        else:
            head = init_head(ds.dim, self.hidden_dim, self.out_dim, rng)
        state = LarsState.init(head, self.momentum, self.weight_decay, self.trust_coef)
        steps = self.epochs * max(1, -(-ds.n_items // self.unlabelled_batch_size))
        sched = make_warmup_cosine(steps, self.start_lr, self.max_lr,
                                   self.final_lr, self.warmup_frac)
        self.head_, self.history_ = train_paws(ds, protos, head, cfg, state, sched, rng)
        self.prototype_z_ = forward_project(self.head_, ds.canonical[proto_indices])
        self.prototype_soft_labels_ = protos.soft_labels
        return self

    def predict_proba(self, X):
        _check_fitted(self, "head_")
        if isinstance(X, EmbeddingDataset):
            X = X.canonical
        z = forward_project(self.head_, normalize_rows(np.asarray(X, dtype=np.float32)))
        return predict_classes(z, self.prototype_z_, self.prototype_soft_labels_, self.tau)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)



class WeightedKnnClassifier(ClassifierMixin, BaseEstimator):
    """Exponentially weighted cosine kNN over unit-normalized rows."""

    def __init__(self, k=200, tau=0.1):
        self.k = k
        self.tau = tau

    def fit(self, X, y):
        if isinstance(X, EmbeddingDataset):
            X = X.canonical
        self.train_z_ = normalize_rows(np.asarray(X, dtype=np.float64))
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        self.n_classes_ = int(self.classes_.max()) + 1
        self.train_y_ = check_labels(y, self.n_classes_, "y")
        return self

    def predict_proba(self, X):
        _check_fitted(self, "train_z_")
        if isinstance(X, EmbeddingDataset):
            X = X.canonical
        queries = normalize_rows(np.asarray(X, dtype=np.float64))
        return _knn_predict_batch(self.train_z_, self.train_y_, queries,
                                  KnnConfig(k=self.k, tau=self.tau), self.n_classes_)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class PrototypeSelector(BaseEstimator):
    """Unsupervised selection of a labelling budget's worth of item indices."""

    def __init__(self, method="simple_kmeans", budget=10, random_state=0):
        self.method = method
        self.budget = budget
        self.random_state = random_state

    def fit(self, X, y=None):
        ds = X if isinstance(X, EmbeddingDataset) else _as_dataset(X, y)
        rng = np.random.default_rng(self.random_state)
        self.selected_indices_ = select_prototypes(ds, self.method, self.budget, rng)
        return self

    def fit_select(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).selected_indices_
