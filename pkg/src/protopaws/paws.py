"""Prototype-based semi-supervised training.

Predictions for a query are a softmax over cosine similarities to labelled
prototype representations, mixed with the prototypes' (smoothed) soft labels.
Training penalizes cross-entropy between each anchor view's prediction and a
sharpened target built from the global views: either the other view's
sharpened prediction (consistency) or the jointly sharpened combination of
both views (pseudolabel). Sharpened targets are constants: no gradient flows
through them, including the mean-entropy term built from their batch average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import EmbeddingDataset, sample_view_batch
from .errors import ContractError, NumericError
from .history import TrainHistory
from .nn import (LarsState, LrSchedule, ProjectionHead, _backward_from_cache,
                 _forward_cache, forward_project, lars_update, lr_at, softmax)
from .validation import check_index_bounds, check_labels, check_simplex

LOSS_MODES = ("consistency", "pseudolabel")


@dataclass
class PawsConfig:
    tau: float = 0.1
    sharpen_T: float = 0.25
    loss_mode: str = "pseudolabel"
    me_max: bool = True
    label_smoothing: float = 0.1
    per_class: int = 0              # 0: derive from labelled_batch_size
    classes_per_batch: int = 0      # 0: all classes
    labelled_batch_size: int = 320
    unlabelled_batch_size: int = 512
    epochs: int = 50
    n_local: int = 6

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if not (0 < self.sharpen_T <= 1):
            raise ContractError("sharpen_T must lie in (0, 1]")
        if self.loss_mode not in LOSS_MODES:
            raise ContractError(f"loss_mode must be one of {LOSS_MODES}")
        if not (0 <= self.label_smoothing < 1):
            raise ContractError("label_smoothing must lie in [0, 1)")
        if self.unlabelled_batch_size < 1 or self.labelled_batch_size < 1:
            raise ContractError("batch sizes must be >= 1")
        if self.epochs < 1 or self.n_local < 0 or self.per_class < 0:
            raise ContractError("invalid counts in config")


@dataclass
class PrototypeSet:
    """Selected labelled items: dataset indices, class ids, smoothed soft labels."""

    indices: np.ndarray
    labels: np.ndarray
    soft_labels: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.indices)) != len(self.indices):
            raise ContractError("prototype indices must be distinct")
        check_simplex(self.soft_labels, "soft_labels")

    @property
    def n_classes(self) -> int:
        return self.soft_labels.shape[1]

    @classmethod
    def from_dataset(cls, ds: EmbeddingDataset, indices,
                     label_smoothing: float = 0.1) -> "PrototypeSet":
        if ds.labels is None:
            raise ContractError("prototype selection requires a labelled dataset")
        idx = check_index_bounds(indices, ds.n_items, "indices")
        labels = ds.labels[idx].astype(np.int64)
        return cls(idx, labels, smooth_labels(labels, ds.n_classes, label_smoothing))


def smooth_labels(labels, n_classes: int, epsilon: float) -> np.ndarray:
    """(1 - eps) * one-hot + eps / C, one row per label."""
    if not (0 <= epsilon < 1):
        raise ContractError("epsilon must lie in [0, 1)")
    labels = check_labels(labels, n_classes)
    out = np.full((labels.size, n_classes), epsilon / n_classes, dtype=np.float64)
    out[np.arange(labels.size), labels] += 1.0 - epsilon
    return out


def _renorm_logits(logits: np.ndarray) -> np.ndarray:
    """exp(logits - rowmax) normalized per row; tolerates -inf entries."""
    mx = np.max(logits, axis=-1, keepdims=True)
    if np.any(~np.isfinite(mx)):
        raise NumericError("degenerate target: all-zero probability products")
    e = np.exp(logits - mx)
    return e / e.sum(axis=-1, keepdims=True)


def sharpen(p: np.ndarray, T: float) -> np.ndarray:
    """Temperature sharpening p_i^(1/T) / sum_j p_j^(1/T) along the last axis."""
    if T <= 0:
        raise ContractError("T must be positive")
    p = check_simplex(p, "p")
    with np.errstate(divide="ignore"):
        logits = np.log(p) / T
    return _renorm_logits(logits)


def joint_sharpen(p1: np.ndarray, p2: np.ndarray, T: float) -> np.ndarray:
    """Sharpened geometric combination (p1_i p2_i)^(1/2T) / sum, along the last axis."""
    if T <= 0:
        raise ContractError("T must be positive")
    p1 = check_simplex(p1, "p1")
    p2 = check_simplex(p2, "p2")
    if p1.shape != p2.shape:
        raise ContractError("p1 and p2 must have the same shape")
    with np.errstate(divide="ignore"):
        logits = (np.log(p1) + np.log(p2)) / (2.0 * T)
    return _renorm_logits(logits)


def _predict_with_sigma(Zq: np.ndarray, Zs: np.ndarray, y_s: np.ndarray,
                        tau: float) -> tuple[np.ndarray, np.ndarray]:
    if Zs.shape[0] == 0:
        raise ContractError("prototype set is empty")
    if Zq.shape[1] != Zs.shape[1]:
        raise ContractError("query and prototype dimensions differ")
    if y_s.shape[0] != Zs.shape[0]:
        raise ContractError("soft labels do not match prototype count")
    sigma = softmax(Zq @ Zs.T, tau=tau, axis=1)
    return sigma @ y_s, sigma


def predict_classes(Zq: np.ndarray, Zs: np.ndarray, y_s: np.ndarray,
                    tau: float) -> np.ndarray:
    """Class probabilities softmax(Zq Zs^T / tau) @ y_s; rows sum to 1."""
    probs, _ = _predict_with_sigma(Zq, Zs, y_s, tau)
    return probs


def predict_classes_backward(sigma: np.ndarray, Zq: np.ndarray, Zs: np.ndarray,
                             y_s: np.ndarray, tau: float,
                             d_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the prediction w.r.t. queries and prototype representations."""
    d_sigma = d_probs @ y_s.T
    d_logits = sigma * (d_sigma - np.sum(d_sigma * sigma, axis=1, keepdims=True))
    return d_logits @ Zs / tau, d_logits.T @ Zq / tau


def paws_targets(preds_g1: np.ndarray, preds_g2: np.ndarray, cfg: PawsConfig
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-anchor targets plus the batch-mean target used by the me-max term.

    Consistency mode swaps sharpened predictions across the two global views;
    pseudolabel mode jointly sharpens them into one shared target. Local-view
    anchors reuse the per-item global target (their mean, in consistency mode).
    """
    if cfg.loss_mode == "pseudolabel":
        t = joint_sharpen(preds_g1, preds_g2, cfg.sharpen_T)
        return t, t, t, t.mean(axis=0)
    t1 = sharpen(preds_g2, cfg.sharpen_T)
    t2 = sharpen(preds_g1, cfg.sharpen_T)
    t_local = 0.5 * (t1 + t2)
    p_bar = np.concatenate([t1, t2], axis=0).mean(axis=0)
    return t1, t2, t_local, p_bar


@dataclass
class PawsLossResult:
    loss: float
    d_g1: np.ndarray
    d_g2: np.ndarray
    d_local: np.ndarray | None
    p_bar: np.ndarray


def _cross_entropy_and_grad(target: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise H(target, pred) = -sum t ln p, and d/dpred, honoring 0*log0 = 0."""
    hot = target > 0
    if np.any(hot & (pred <= 0)):
        raise NumericError("infinite cross-entropy: target mass on zero prediction")
    safe = np.where(hot, pred, 1.0)
    ce = -np.sum(np.where(hot, target * np.log(safe), 0.0), axis=-1)
    grad = np.where(hot, -target / safe, 0.0)
    return ce, grad


def paws_loss(preds_g1: np.ndarray, preds_g2: np.ndarray,
              preds_local: np.ndarray | None, cfg: PawsConfig) -> PawsLossResult:
    """Training loss over one batch of per-view class predictions.

    Cross-entropy of every anchor view against its (constant) sharpened
    target, averaged over all anchor-target pairs, minus the entropy of the
    mean target when me-max is on. Returned gradients are w.r.t. the
    predictions only; the targets contribute none.
    """
    p1 = check_simplex(preds_g1, "preds_g1")
    p2 = check_simplex(preds_g2, "preds_g2")
    if p1.shape != p2.shape or p1.ndim != 2 or p1.shape[0] < 1:
        raise ContractError("predictions for the two global views must be matching (b, C)")
    b, n_classes = p1.shape
    ploc = None
    n_loc = 0
    if preds_local is not None and preds_local.size:
        ploc = check_simplex(preds_local, "preds_local")
        if ploc.ndim != 3 or ploc.shape[0] != b or ploc.shape[2] != n_classes:
            raise ContractError("preds_local must be (b, n_local, C)")
        n_loc = ploc.shape[1]

    t1, t2, t_local, p_bar = paws_targets(p1, p2, cfg)
    n_pairs = (2 + n_loc) * b
    ce1, g1 = _cross_entropy_and_grad(t1, p1)
    ce2, g2 = _cross_entropy_and_grad(t2, p2)
    total = ce1.sum() + ce2.sum()
    d_local = None
    if ploc is not None:
        ce_l, d_local = _cross_entropy_and_grad(t_local[:, None, :], ploc)
        total += ce_l.sum()
        d_local = d_local / n_pairs
    loss = total / n_pairs
    if cfg.me_max:
        hot = p_bar > 0
        loss -= float(-np.sum(p_bar[hot] * np.log(p_bar[hot])))
    return PawsLossResult(float(loss), g1 / n_pairs, g2 / n_pairs, d_local, p_bar)


def stratified_batch(protos: PrototypeSet, per_class: int, classes_per_batch: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Positions into the prototype set: per_class draws for each sampled class.

    Draws are without replacement within a class when it has enough members,
    with replacement otherwise. Deterministic given the generator state.
    """
    present = np.unique(protos.labels)
    if classes_per_batch < 1 or per_class < 1:
        raise ContractError("per_class and classes_per_batch must be >= 1")
    if classes_per_batch > present.size:
        raise ContractError(
            f"requested {classes_per_batch} classes but only {present.size} have prototypes")
    if classes_per_batch == present.size:
        classes = present
    else:
        classes = rng.choice(present, size=classes_per_batch, replace=False)
    picks = []
    for c in classes:
        members = np.flatnonzero(protos.labels == c)
        replace = per_class > members.size
        picks.append(rng.choice(members, size=per_class, replace=replace))
    return np.concatenate(picks)


def _project_groups(head: ProjectionHead, groups: list[np.ndarray]):
    X = np.concatenate(groups, axis=0)
    Y, cache = _forward_cache(head, X)
    splits = np.cumsum([g.shape[0] for g in groups])[:-1]
    return np.split(Y, splits), Y, cache


def prototype_accuracy(head: ProjectionHead, ds: EmbeddingDataset,
                       protos: PrototypeSet, eval_ds: EmbeddingDataset,
                       tau: float) -> float:
    """Accuracy of the prototype classifier on ``eval_ds`` canonical embeddings."""
    if eval_ds.labels is None:
        raise ContractError("evaluation dataset must be labelled")
    z_s = forward_project(head, ds.canonical[protos.indices])
    z_q = forward_project(head, eval_ds.canonical)
    preds = predict_classes(z_q, z_s, protos.soft_labels, tau)
    return float(np.mean(np.argmax(preds, axis=1) == eval_ds.labels))


def train_paws(ds: EmbeddingDataset, protos: PrototypeSet, head: ProjectionHead,
               cfg: PawsConfig, state: LarsState, sched: LrSchedule,
               rng: np.random.Generator,
               val_ds: EmbeddingDataset | None = None,
               ) -> tuple[ProjectionHead, TrainHistory]:
    """Prototype-based semi-supervised training loop.

    Per step: a class-stratified labelled batch provides the prototype
    representations (two projected global views per labelled item), an
    unlabelled batch provides anchor views (two global plus n_local local),
    and one LARS step is taken on the configured loss. History logs per-epoch
    mean loss and, when ``val_ds`` is given, prototype-classifier accuracy.
    """
    if ds.dim != head.in_dim:
        raise ContractError(f"head expects dim {head.in_dim}, dataset has {ds.dim}")
    if cfg.n_local > ds.n_local:
        raise ContractError(f"n_local={cfg.n_local} exceeds dataset pool {ds.n_local}")
    present = np.unique(protos.labels)
    classes_eff = cfg.classes_per_batch or present.size
    per_class_eff = cfg.per_class or max(1, cfg.labelled_batch_size // classes_eff)
    history = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(ds.n_items)
        losses = []
        for start in range(0, ds.n_items, cfg.unlabelled_batch_size):
            u_ids = order[start:start + cfg.unlabelled_batch_size]
            pos = stratified_batch(protos, per_class_eff, classes_eff, rng)
            s_batch = sample_view_batch(ds, protos.indices[pos], 0, rng)
            x_s = s_batch.global_views.reshape(-1, ds.dim)
            y_s = np.repeat(protos.soft_labels[pos], 2, axis=0)
            u_batch = sample_view_batch(ds, u_ids, cfg.n_local, rng)
            b = u_ids.size
            x_g1 = u_batch.global_views[:, 0]
            x_g2 = u_batch.global_views[:, 1]
            x_loc = u_batch.local_views.reshape(-1, ds.dim)
            groups = [x_s, x_g1, x_g2] + ([x_loc] if x_loc.size else [])
            parts, y_all, cache = _project_groups(head, groups)
            z_s, z_g1, z_g2 = parts[0], parts[1], parts[2]
            p1, sig1 = _predict_with_sigma(z_g1, z_s, y_s, cfg.tau)
            p2, sig2 = _predict_with_sigma(z_g2, z_s, y_s, cfg.tau)
            ploc = sig_l = z_loc = None
            if x_loc.size:
                z_loc = parts[3]
                pl_flat, sig_l = _predict_with_sigma(z_loc, z_s, y_s, cfg.tau)
                ploc = pl_flat.reshape(b, cfg.n_local, -1)
            res = paws_loss(p1, p2, ploc, cfg)
            dtype = y_all.dtype
            d_zq1, d_zs1 = predict_classes_backward(
                sig1, z_g1, z_s, y_s, cfg.tau, res.d_g1.astype(dtype))
            d_zq2, d_zs2 = predict_classes_backward(
                sig2, z_g2, z_s, y_s, cfg.tau, res.d_g2.astype(dtype))
            d_zs = d_zs1 + d_zs2
            d_queries = [d_zq1, d_zq2]
            if x_loc.size:
                d_zql, d_zsl = predict_classes_backward(
                    sig_l, z_loc, z_s, y_s, cfg.tau,
                    res.d_local.reshape(-1, res.d_local.shape[-1]).astype(dtype))
                d_zs = d_zs + d_zsl
                d_queries.append(d_zql)
            upstream = [d_zs] + d_queries
            grads = _backward_from_cache(head, cache, y_all,
                                         np.concatenate(upstream, axis=0).astype(dtype))
            head, state = lars_update(state, head, grads, lr_at(sched, step))
            losses.append(res.loss)
            step += 1
        acc = None
        if val_ds is not None:
            acc = prototype_accuracy(head, ds, protos, val_ds, cfg.tau)
        history.append(epoch=epoch, loss=float(np.mean(losses)), val_acc=acc)
    return head, history
