import numpy as np
import pytest

from protopaws import MixtureSpec, gen_mixture


def unit_rows(rng, n, d, dtype=np.float64):
    X = rng.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X.astype(dtype)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_param_grad(head, loss_fn, h=1e-5):
    """Central finite differences of loss_fn(head) over every head parameter."""
    flat = head.flatten()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        pert = flat.copy()
        pert[i] += h
        up = loss_fn(head.with_flat(pert))
        pert[i] -= 2 * h
        down = loss_fn(head.with_flat(pert))
        out[i] = (up - down) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_mixture():
    spec = MixtureSpec(n_classes=4, points_per_class=25, dim=12,
                       class_kappa=800.0, view_kappa=300.0,
                       n_global=3, n_local=3, seed=7)
    return gen_mixture(spec)
