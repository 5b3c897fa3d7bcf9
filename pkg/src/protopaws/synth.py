"""Labelled vMF-mixture datasets on the unit sphere, with view pools.

Class means are drawn approximately orthogonally so separability can be
controlled through the concentration parameters: canonical points are vMF
draws around a class mean, and each view is a vMF draw around its item's
canonical point (simulated augmentation noise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import EmbeddingDataset
from .errors import ContractError


@dataclass
class MixtureSpec:
    n_classes: int
    points_per_class: tuple[int, ...]
    dim: int
    class_kappa: float
    view_kappa: float
    n_global: int = 2
    n_local: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.points_per_class, int):
            self.points_per_class = (self.points_per_class,) * self.n_classes
        self.points_per_class = tuple(int(c) for c in self.points_per_class)
        if len(self.points_per_class) != self.n_classes:
            raise ContractError("points_per_class length must equal n_classes")
        if min(self.points_per_class) < 1 or self.n_classes < 1 or self.n_global < 1:
            raise ContractError("counts must be >= 1")
        if self.n_local < 0:
            raise ContractError("n_local must be >= 0")
        if self.class_kappa <= 0 or self.view_kappa <= 0:
            raise ContractError("concentrations must be positive")
        if self.dim < 3:
            raise ContractError(f"dim must be >= 3, got {self.dim}")
        if self.n_classes > self.dim:
            raise ContractError(
                f"cannot draw {self.n_classes} orthogonal means in dimension {self.dim}")


def _sample_w(kappa: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Radial components of n vMF draws (Wood's rejection scheme), vectorized."""
    m = dim - 1
    b = m / (np.sqrt(4.0 * kappa * kappa + m * m) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0 * x0)
    out = np.empty(n)
    need = np.arange(n)
    while need.size:
        z = rng.beta(m / 2.0, m / 2.0, size=need.size)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(need.size)
        accept = kappa * w + m * np.log1p(-x0 * w) - c >= np.log(u)
        out[need[accept]] = w[accept]
        need = need[~accept]
    return out


def sample_vmf(mu: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """One exact vMF draw with mean direction ``mu`` and concentration ``kappa``."""
    return sample_vmf_many(mu, kappa, 1, rng)[0]


def sample_vmf_many(mu: np.ndarray, kappa: float, n: int,
                    rng: np.random.Generator) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.size
    if d < 2:
        raise ContractError("mu must have dimension >= 2")
    if abs(np.linalg.norm(mu) - 1.0) > 1e-6:
        raise ContractError("mu must be a unit vector")
    if kappa < 0:
        raise ContractError("kappa must be >= 0")
    w = _sample_w(kappa, d, n, rng)
    v = rng.standard_normal((n, d))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = v * np.sqrt(np.maximum(0.0, 1.0 - w * w))[:, None] + w[:, None] * mu
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def orthogonal_means(n_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal class means via QR of a random Gaussian matrix, sign-fixed."""
    a = rng.standard_normal((dim, n_classes))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def gen_mixture(spec: MixtureSpec) -> EmbeddingDataset:
    """Generate the full labelled dataset described by ``spec``; deterministic given seed."""
    rng = np.random.default_rng(spec.seed)
    means = orthogonal_means(spec.n_classes, spec.dim, rng)
    n_total = sum(spec.points_per_class)
    canonical = np.empty((n_total, spec.dim), dtype=np.float64)
    global_views = np.empty((n_total, spec.n_global, spec.dim), dtype=np.float64)
    local_views = np.empty((n_total, spec.n_local, spec.dim), dtype=np.float64)
    labels = np.empty(n_total, dtype=np.int32)
    row = 0
    for c, count in enumerate(spec.points_per_class):
        pts = sample_vmf_many(means[c], spec.class_kappa, count, rng)
        for i in range(count):
            canonical[row] = pts[i]
            views = sample_vmf_many(pts[i], spec.view_kappa,
                                    spec.n_global + spec.n_local, rng)
            global_views[row] = views[:spec.n_global]
            local_views[row] = views[spec.n_global:]
            labels[row] = c
            row += 1
    ds = EmbeddingDataset(
        canonical.astype(np.float32),
        global_views.astype(np.float32),
        local_views.astype(np.float32),
        labels,
        spec.n_classes,
    )
    return ds.validate()
