"""Neighbour-embedding pretraining of the projection head with vMF kernels.

For a mini-batch of unit embeddings, a conditional neighbour distribution is
built per row from the kernel exp(kappa_i * cos_sim), with kappa_i calibrated
by bisection so the row's Shannon entropy (base 2) hits log2(perplexity);
normalizing constants cancel inside the conditionals and are never evaluated.
Conditionals are symmetrized to P. The projected batch gets the same
treatment with a constant concentration 1/tau, giving Q, and the head is
trained to minimize sum_{i!=j} p_ij * log(p_ij / q_ij).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .dataset import EmbeddingDataset
from .errors import ContractError, NumericError
from .history import TrainHistory
from .nn import (LarsState, LrSchedule, ProjectionHead, _backward_from_cache,
                 _forward_cache, lars_update, lr_at)
from .validation import check_unit_rows

logger = logging.getLogger(__name__)

_LN2 = np.log(2.0)


@dataclass
class VmfSneConfig:
    perplexity: float = 30.0
    tau: float = 0.1
    batch_size: int = 512
    epochs: int = 20
    bisect_tol_bits: float = 1e-4
    bisect_max_iter: int = 64
    kappa_min: float = 1e-2
    kappa_max: float = 1e6

    def __post_init__(self):
        if self.perplexity < 2:
            raise ContractError(f"perplexity must be >= 2, got {self.perplexity}")
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if not (0 < self.kappa_min < self.kappa_max):
            raise ContractError("need 0 < kappa_min < kappa_max")
        if self.batch_size < 3:
            raise ContractError("batch_size must be >= 3")
        if self.epochs < 1 or self.bisect_max_iter < 1:
            raise ContractError("epochs and bisect_max_iter must be >= 1")
        if self.bisect_tol_bits <= 0:
            raise ContractError("bisect_tol_bits must be positive")


class KappaResult(NamedTuple):
    kappa: float
    degenerate: bool


@dataclass
class PMatrix:
    """Symmetrized neighbour probabilities in backbone space plus per-row kappas."""

    probs: np.ndarray
    kappas: np.ndarray
    degenerate_rows: np.ndarray


@dataclass
class QMatrix:
    """Symmetrized neighbour probabilities in projected space (constant 1/tau)."""

    probs: np.ndarray


def _row_entropies_bits(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy (bits) of softmax(logits) per row, computed stably in nats."""
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    s = e.sum(axis=1)
    p = e / s[:, None]
    lse = np.log(s) + mx[:, 0]
    h_nats = lse - (p * logits).sum(axis=1)
    return h_nats / _LN2


_MAX_BRACKET_EXPANSIONS = 12


def _bisect_rows(sims: np.ndarray, target_bits: float,
                 cfg: VmfSneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-row kappa so that the conditional row entropy hits ``target_bits``.

    ``sims`` is (rows, m): each row's cosine similarities to the other points.
    Entropy is monotone decreasing in kappa, which makes bisection valid. The
    bracket is expanded by factors of 10 when it does not straddle the target.
    Rows where the target is unattainable (constant similarities, or a target
    at or above the log2(m) ceiling) come back flagged with kappa_min.
    """
    sims = np.asarray(sims, dtype=np.float64)
    rows, m = sims.shape
    if target_bits > np.log2(m) + 1e-9:
        raise ContractError(
            f"target entropy {target_bits:.4f} bits exceeds ceiling log2({m})")
    kappas = np.full(rows, cfg.kappa_min)
    degenerate = np.ptp(sims, axis=1) < 1e-12
    active = ~degenerate

    lo = np.full(rows, cfg.kappa_min)
    hi = np.full(rows, cfg.kappa_max)
    for _ in range(_MAX_BRACKET_EXPANSIONS):
        need = active & (_row_entropies_bits(hi[:, None] * sims) > target_bits)
        if not need.any():
            break
        hi[need] *= 10.0
    # kappa_min is a hard floor: rows whose entropy at the floor is still
    # below target sit at the log2(m) ceiling and can never reach it
    ceiling = active & (_row_entropies_bits(lo[:, None] * sims) < target_bits)
    degenerate = degenerate | ceiling
    active = active & ~ceiling

    for _ in range(cfg.bisect_max_iter):
        if not active.any():
            break
        mid = np.sqrt(lo * hi)
        h = _row_entropies_bits(mid[:, None] * sims)
        done = active & (np.abs(h - target_bits) <= cfg.bisect_tol_bits)
        kappas[done] = mid[done]
        active = active & ~done
        go_up = active & (h > target_bits)
        lo[go_up] = mid[go_up]
        go_down = active & (h < target_bits)
        hi[go_down] = mid[go_down]
    if active.any():
        kappas[active] = np.sqrt(lo[active] * hi[active])
    return kappas, degenerate


def bisect_kappa(sims, target_entropy: float, cfg: VmfSneConfig) -> KappaResult:
    """Concentration for one conditional row; see ``_bisect_rows`` for semantics."""
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 1 or sims.size < 2:
        raise ContractError("sims must be a row of at least 2 similarities")
    kappas, degenerate = _bisect_rows(sims[None, :], target_entropy, cfg)
    return KappaResult(float(kappas[0]), bool(degenerate[0]))


def _offdiag(S: np.ndarray) -> np.ndarray:
    """Strip the diagonal: (b, b) -> (b, b-1), row i keeping order of j != i."""
    b = S.shape[0]
    return S[~np.eye(b, dtype=bool)].reshape(b, b - 1)


def _conditional_from_logits(logits_offdiag: np.ndarray) -> np.ndarray:
    """Row-stochastic (b, b) conditional matrix with zero diagonal."""
    b = logits_offdiag.shape[0]
    mx = logits_offdiag.max(axis=1, keepdims=True)
    e = np.exp(logits_offdiag - mx)
    rows = e / e.sum(axis=1, keepdims=True)
    full = np.zeros((b, b), dtype=np.float64)
    full[~np.eye(b, dtype=bool)] = rows.ravel()
    return full


def build_p_matrix(Z: np.ndarray, cfg: VmfSneConfig) -> PMatrix:
    """Symmetrized P over a mini-batch of unit embeddings.

    Per row the conditional uses its bisected kappa_i (targeting
    log2(perplexity) bits, clamped to the batch ceiling); the symmetrization
    is p_ij = (p_{j|i} + p_{i|j}) / (2b) with zero diagonal.
    """
    Z = check_unit_rows(np.asarray(Z, dtype=np.float64), "Z")
    b = Z.shape[0]
    if b < 3:
        raise ContractError(f"batch must have >= 3 rows, got {b}")
    S = _offdiag(Z @ Z.T)
    target = min(np.log2(cfg.perplexity), np.log2(b - 1))
    kappas, degenerate = _bisect_rows(S, target, cfg)
    cond = _conditional_from_logits(kappas[:, None] * S)
    probs = (cond + cond.T) / (2.0 * b)
    return PMatrix(probs, kappas, degenerate)


def build_q_matrix(Zp: np.ndarray, tau: float) -> QMatrix:
    """Symmetrized Q over projected unit embeddings with constant concentration 1/tau."""
    Zp = check_unit_rows(np.asarray(Zp, dtype=np.float64), "Zp")
    b = Zp.shape[0]
    if b < 3:
        raise ContractError(f"batch must have >= 3 rows, got {b}")
    if tau <= 0:
        raise ContractError("tau must be positive")
    S = _offdiag(Zp @ Zp.T)
    cond = _conditional_from_logits(S / tau)
    probs = (cond + cond.T) / (2.0 * b)
    return QMatrix(probs)


def _as_probs(m) -> np.ndarray:
    return m.probs if hasattr(m, "probs") else np.asarray(m, dtype=np.float64)


def kl_loss(P, Q) -> float:
    """sum_{i!=j} p_ij * log(p_ij / q_ij), with 0*log0 taken as 0."""
    p = _as_probs(P)
    q = _as_probs(Q)
    if p.shape != q.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise NumericError("q has zero mass where p is positive: infinite KL")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl_loss_and_grad(P, Zp: np.ndarray, tau: float) -> tuple[float, np.ndarray, QMatrix]:
    """KL loss plus its exact gradient w.r.t. the projected unit embeddings.

    The gradient chains through the per-row softmax of the Q conditionals and
    the symmetrization; P is a constant. Math runs in float64; the gradient is
    returned in float64 regardless of the input dtype.
    """
    p = _as_probs(P)
    Zp64 = np.asarray(Zp, dtype=np.float64)
    b = Zp64.shape[0]
    if p.shape != (b, b):
        raise ContractError(f"P shape {p.shape} does not match batch size {b}")
    S = _offdiag(Zp64 @ Zp64.T)
    cond = _conditional_from_logits(S / tau)
    q = (cond + cond.T) / (2.0 * b)
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise NumericError("q has zero mass where p is positive: infinite KL")
    loss = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    # dL/d q_{j|i}: each conditional feeds both q_ij and q_ji with weight 1/(2b)
    gc = np.where(mask, -p / np.where(mask, b * q, 1.0), 0.0)
    c = (cond * gc).sum(axis=1)
    d = cond * (gc - c[:, None]) / tau
    grad = (d + d.T) @ Zp64
    return loss, grad, QMatrix(q)


def pretrain_vmfsne(ds: EmbeddingDataset, head: ProjectionHead, cfg: VmfSneConfig,
                    state: LarsState, sched: LrSchedule, rng: np.random.Generator,
                    eval_fn: Callable[[ProjectionHead], float] | None = None,
                    ) -> tuple[ProjectionHead, TrainHistory]:
    """Train the head to reproduce backbone-space neighbourhoods in projected space.

    Every global view row of the dataset is treated as an independent point.
    Per step: build P over the sampled batch in backbone space, project, build
    Q, take one LARS step on the KL loss. History records per-epoch mean KL
    and, when ``eval_fn`` is given, its kNN-style accuracy of the head.
    """
    pool = ds.global_views.reshape(-1, ds.dim).astype(np.float32)
    n_pool = pool.shape[0]
    if n_pool < cfg.batch_size:
        raise ContractError(
            f"dataset has {n_pool} view rows, fewer than batch_size={cfg.batch_size}")
    if cfg.perplexity > cfg.batch_size - 1:
        raise ContractError("perplexity must be below batch_size - 1")
    steps_per_epoch = n_pool // cfg.batch_size
    history = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_pool)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            X = pool[idx]
            P = build_p_matrix(X, cfg)
            if P.degenerate_rows.all():
                logger.warning("skipping degenerate batch at epoch %d step %d", epoch, s)
                step += 1
                continue
            Zp, cache = _forward_cache(head, X)
            loss, dzp, _ = kl_loss_and_grad(P.probs, Zp, cfg.tau)
            grads = _backward_from_cache(head, cache, Zp, dzp.astype(Zp.dtype))
            head, state = lars_update(state, head, grads, lr_at(sched, step))
            losses.append(loss)
            step += 1
        mean_kl = float(np.mean(losses)) if losses else float("nan")
        acc = float(eval_fn(head)) if eval_fn is not None else None
        history.append(epoch=epoch, kl=mean_kl, knn_acc=acc)
    return head, history
