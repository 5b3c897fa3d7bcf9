import math

import numpy as np
import pytest

from protopaws import (ContractError, KnnConfig, MixtureSpec, evaluate_knn,
                       gen_mixture, sample_vmf, sample_vmf_many)
from protopaws.dataset import subset_dataset


def test_kappa_zero_is_uniform_on_sphere():
    rng = np.random.default_rng(0)
    mu = np.zeros(5)
    mu[0] = 1.0
    samples = sample_vmf_many(mu, 0.0, 10_000, rng)
    np.testing.assert_allclose(np.linalg.norm(samples, axis=1), 1.0, atol=1e-9)
    assert np.linalg.norm(samples.mean(axis=0)) < 0.05


def test_huge_kappa_concentrates():
    rng = np.random.default_rng(1)
    mu = np.array([0.0, 0.0, 1.0])
    for _ in range(50):
        x = sample_vmf(mu, 1e8, rng)
        assert math.acos(min(1.0, float(x @ mu))) < 1e-3


def test_mean_resultant_length_matches_closed_form():
    # for d=3 the mean resultant length is coth(kappa) - 1/kappa
    rng = np.random.default_rng(2)
    kappa = 10.0
    mu = np.array([1.0, 0.0, 0.0])
    samples = sample_vmf_many(mu, kappa, 100_000, rng)
    expected = 1.0 / math.tanh(kappa) - 1.0 / kappa
    assert abs(np.linalg.norm(samples.mean(axis=0)) - expected) < 0.01


def test_sample_vmf_contracts():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        sample_vmf(np.array([1.0, 1.0]), 1.0, rng)
    with pytest.raises(ContractError):
        sample_vmf(np.array([1.0, 0.0]), -1.0, rng)


def test_gen_mixture_deterministic_and_counts():
    spec = MixtureSpec(n_classes=5, points_per_class=(10, 20, 30, 40, 50), dim=8,
                       class_kappa=100.0, view_kappa=50.0, n_global=2, n_local=1, seed=3)
    a = gen_mixture(spec)
    b = gen_mixture(spec)
    assert a == b
    assert a.n_items == 150
    np.testing.assert_array_equal(np.bincount(a.labels), [10, 20, 30, 40, 50])
    for block in (a.canonical, a.global_views.reshape(-1, 8), a.local_views.reshape(-1, 8)):
        np.testing.assert_allclose(np.linalg.norm(block.astype(np.float64), axis=1),
                                   1.0, atol=1e-5)


def test_gen_mixture_separable_preset_nn_accuracy():
    spec = MixtureSpec(n_classes=10, points_per_class=40, dim=64,
                       class_kappa=1e4, view_kappa=1e4, n_global=1, seed=4)
    ds = gen_mixture(spec)
    train = subset_dataset(ds, np.arange(0, 400, 2))
    evals = subset_dataset(ds, np.arange(1, 400, 2))
    assert evaluate_knn(train, evals, KnnConfig(k=1, tau=0.1)) == 1.0


def test_gen_mixture_contracts():
    with pytest.raises(ContractError):
        MixtureSpec(n_classes=10, points_per_class=5, dim=8,
                    class_kappa=10.0, view_kappa=10.0)
    with pytest.raises(ContractError):
        MixtureSpec(n_classes=2, points_per_class=(5,), dim=8,
                    class_kappa=10.0, view_kappa=10.0)
    with pytest.raises(ContractError):
        MixtureSpec(n_classes=2, points_per_class=5, dim=2,
                    class_kappa=10.0, view_kappa=10.0)
