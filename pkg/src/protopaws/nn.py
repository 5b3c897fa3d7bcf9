"""Projection head, its reverse-mode gradients, LARS-SGD, and the LR schedule.

The head is a 3-layer MLP with GELU after the first two affine maps and a
final row-wise normalization onto the unit sphere. Forward and backward are
written out by hand so gradients can be checked against finite differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ContractError, FormatError, NumericError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def softmax(v: np.ndarray, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax with max-subtraction for stability."""
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    z = np.asarray(v) / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class ProjectionHead:
    """Three affine maps (in -> hidden -> hidden -> out) with unit-norm output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "ProjectionHead":
        return ProjectionHead([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "ProjectionHead":
        return ProjectionHead([w.astype(dtype) for w in self.weights],
                              [b.astype(dtype) for b in self.biases])

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for pair in zip(self.weights, self.biases) for t in pair])

    def with_flat(self, flat: np.ndarray) -> "ProjectionHead":
        """Rebuild a head from a flat parameter vector (same layout as flatten)."""
        out, pos = [], 0
        for w, b in zip(self.weights, self.biases):
            out.append((flat[pos:pos + w.size].reshape(w.shape), pos + w.size))
            pos += w.size
            out.append((flat[pos:pos + b.size].reshape(b.shape), pos + b.size))
            pos += b.size
        tensors = [t for t, _ in out]
        return ProjectionHead(tensors[0::2], tensors[1::2])


@dataclass
class HeadGrads:
    """Parameter gradients, shaped like the head's weights and biases."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for pair in zip(self.weights, self.biases) for t in pair])


def init_head(in_dim: int, hidden_dim: int, out_dim: int,
              rng: np.random.Generator, dtype=np.float32) -> ProjectionHead:
    """He-scaled zero-mean weights, zero biases. Deterministic given the generator."""
    if min(in_dim, hidden_dim, out_dim) < 1:
        raise ContractError("head dimensions must be >= 1")
    dims = [(in_dim, hidden_dim), (hidden_dim, hidden_dim), (hidden_dim, out_dim)]
    weights = [(rng.standard_normal(d) * math.sqrt(2.0 / d[0])).astype(dtype) for d in dims]
    biases = [np.zeros(d[1], dtype=dtype) for d in dims]
    return ProjectionHead(weights, biases)


def _forward_cache(head: ProjectionHead, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != head.in_dim:
        raise ContractError(f"X must be (b, {head.in_dim}), got {X.shape}")
    w1, w2, w3 = head.weights
    b1, b2, b3 = head.biases
    h1 = X @ w1 + b1
    a1 = gelu(h1)
    h2 = a1 @ w2 + b2
    a2 = gelu(h2)
    h3 = a2 @ w3 + b3
    norms = np.linalg.norm(h3, axis=1, keepdims=True)
    if h3.shape[0] and np.min(norms) < 1e-12:
        raise NumericError("projection collapsed to (near) zero before normalization")
    Y = h3 / norms
    return Y, (X, h1, a1, h2, a2, norms)


def forward_project(head: ProjectionHead, X: np.ndarray) -> np.ndarray:
    """Project a batch through the head; every output row has unit norm."""
    Y, _ = _forward_cache(head, X)
    return Y


def _backward_from_cache(head: ProjectionHead, cache, Y: np.ndarray,
                         upstream: np.ndarray) -> HeadGrads:
    X, h1, a1, h2, a2, norms = cache
    if upstream.shape != Y.shape:
        raise ContractError(f"upstream shape {upstream.shape} does not match output {Y.shape}")
    w1, w2, w3 = head.weights
    # normalization: y = h3/||h3||, so dh3 = (u - (u.y) y)/||h3||
    dh3 = (upstream - np.sum(upstream * Y, axis=1, keepdims=True) * Y) / norms
    dw3 = a2.T @ dh3
    db3 = dh3.sum(axis=0)
    da2 = dh3 @ w3.T
    dh2 = da2 * gelu_grad(h2)
    dw2 = a1.T @ dh2
    db2 = dh2.sum(axis=0)
    da1 = dh2 @ w2.T
    dh1 = da1 * gelu_grad(h1)
    dw1 = X.T @ dh1
    db1 = dh1.sum(axis=0)
    return HeadGrads([dw1, dw2, dw3], [db1, db2, db3])


def backward_gradients(head: ProjectionHead, X: np.ndarray,
                       upstream: np.ndarray) -> HeadGrads:
    """Exact reverse-mode gradients of a scalar loss w.r.t. every head parameter.

    ``upstream`` is the loss gradient w.r.t. the normalized projected output;
    the Jacobian of the final normalization is included.
    """
    Y, cache = _forward_cache(head, X)
    return _backward_from_cache(head, cache, Y, upstream)


@dataclass
class LarsState:
    """Momentum buffers plus the LARS hyperparameters."""

    weight_buffers: list[np.ndarray]
    bias_buffers: list[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coef: float = 0.001
    eps: float = 1e-8

    @classmethod
    def init(cls, head: ProjectionHead, momentum: float = 0.9,
             weight_decay: float = 1e-6, trust_coef: float = 0.001) -> "LarsState":
        return cls([np.zeros_like(w) for w in head.weights],
                   [np.zeros_like(b) for b in head.biases],
                   momentum, weight_decay, trust_coef)


def lars_update(state: LarsState, head: ProjectionHead, grads: HeadGrads,
                lr: float) -> tuple[ProjectionHead, LarsState]:
    """One LARS-SGD step; returns the updated head and state without mutating inputs.

    Weight tensors get a per-tensor trust-scaled rate; bias tensors use the
    global rate with no trust adaptation and no weight decay.
    """
    for g in grads.weights + grads.biases:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in LARS update")
    new_w, new_wbuf = [], []
    for w, g, m in zip(head.weights, grads.weights, state.weight_buffers):
        g_eff = g + state.weight_decay * w
        local = state.trust_coef * np.linalg.norm(w) / (np.linalg.norm(g_eff) + state.eps)
        m_next = state.momentum * m + local * lr * g_eff
        new_w.append(w - m_next)
        new_wbuf.append(m_next)
    new_b, new_bbuf = [], []
    for b, g, m in zip(head.biases, grads.biases, state.bias_buffers):
        m_next = state.momentum * m + lr * g
        new_b.append(b - m_next)
        new_bbuf.append(m_next)
    head_next = ProjectionHead(new_w, new_b)
    state_next = LarsState(new_wbuf, new_bbuf, state.momentum,
                           state.weight_decay, state.trust_coef, state.eps)
    return head_next, state_next


@dataclass
class LrSchedule:
    """Linear warmup to max_lr, then cosine annealing down to final_lr."""

    start_lr: float = 0.3
    max_lr: float = 6.4
    final_lr: float = 0.064
    warmup_steps: int = 1
    total_steps: int = 10

    def __post_init__(self):
        if not (0 < self.warmup_steps < self.total_steps):
            raise ContractError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if min(self.start_lr, self.max_lr, self.final_lr) <= 0:
            raise ContractError("learning rates must be positive")


def make_warmup_cosine(total_steps: int, start_lr: float = 0.3, max_lr: float = 6.4,
                       final_lr: float = 0.064, warmup_frac: float = 0.1) -> LrSchedule:
    """Schedule over a whole run: warmup covers ``warmup_frac`` of the steps."""
    total = max(2, total_steps)
    warmup = min(max(1, int(round(warmup_frac * total))), total - 1)
    return LrSchedule(start_lr, max_lr, final_lr, warmup, total)


def lr_at(sched: LrSchedule, step: int) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ContractError(f"step {step} outside [0, {sched.total_steps}]")
    if step <= sched.warmup_steps:
        frac = step / sched.warmup_steps
        return sched.start_lr + (sched.max_lr - sched.start_lr) * frac
    t = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.final_lr + 0.5 * (sched.max_lr - sched.final_lr) * (1.0 + math.cos(math.pi * t))


HEAD_MAGIC = b"HED1"
_HEAD_HEADER = struct.Struct("<4sIII")


def save_head(head: ProjectionHead, path) -> None:
    """Checkpoint: dims header then parameter tensors in declaration order, float32 LE."""
    parts = [_HEAD_HEADER.pack(HEAD_MAGIC, head.in_dim, head.hidden_dim, head.out_dim)]
    for w, b in zip(head.weights, head.biases):
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_head(path) -> ProjectionHead:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD_HEADER.size:
        raise FormatError("truncated checkpoint: header incomplete")
    magic, in_dim, hidden_dim, out_dim = _HEAD_HEADER.unpack_from(raw)
    if magic != HEAD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {HEAD_MAGIC!r}")
    dims = [(in_dim, hidden_dim), (hidden_dim, hidden_dim), (hidden_dim, out_dim)]
    offset = _HEAD_HEADER.size
    weights, biases = [], []
    for d_in, d_out in dims:
        end = offset + 4 * d_in * d_out
        if len(raw) < end:
            raise FormatError("truncated checkpoint: weight tensor incomplete")
        weights.append(np.frombuffer(raw[offset:end], dtype="<f4").reshape(d_in, d_out).copy())
        offset = end
        end = offset + 4 * d_out
        if len(raw) < end:
            raise FormatError("truncated checkpoint: bias tensor incomplete")
        biases.append(np.frombuffer(raw[offset:end], dtype="<f4").copy())
        offset = end
    if offset != len(raw):
        raise FormatError("trailing bytes in checkpoint")
    return ProjectionHead(weights, biases)
