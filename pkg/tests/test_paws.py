import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protopaws import (ContractError, LarsState, LrSchedule, NumericError,
                       PawsConfig, PrototypeSet, init_head, joint_sharpen,
                       paws_loss, predict_classes, prototype_accuracy,
                       sharpen, smooth_labels, stratified_batch, train_paws)
from protopaws.paws import paws_targets
from protopaws.synth import MixtureSpec, gen_mixture
from tests.conftest import rel_err, unit_rows


def simplex(rng, *shape):
    p = rng.random(shape) + 1e-3
    return p / p.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- predictions

def test_predict_self_similarity_dominates(rng):
    protos = unit_rows(rng, 3, 6)
    y_s = smooth_labels(np.array([0, 1, 2]), 3, 0.0)
    preds = predict_classes(protos, protos, y_s, 0.1)
    np.testing.assert_array_equal(np.argmax(preds, axis=1), [0, 1, 2])


def test_predict_uniform_soft_labels_give_uniform(rng):
    protos = unit_rows(rng, 4, 5)
    y_s = np.full((4, 3), 1 / 3)
    preds = predict_classes(unit_rows(rng, 2, 5), protos, y_s, 0.1)
    np.testing.assert_allclose(preds, 1 / 3, atol=1e-12)


def test_predict_matches_hand_computation(rng):
    # 3 prototypes, 2 classes, written out with explicit softmax-then-mix
    z_q = unit_rows(rng, 2, 4)
    z_s = unit_rows(rng, 3, 4)
    y_s = smooth_labels(np.array([0, 1, 1]), 2, 0.1)
    tau = 0.1
    preds = predict_classes(z_q, z_s, y_s, tau)
    for i in range(2):
        logits = [float(z_q[i] @ z_s[m]) / tau for m in range(3)]
        mx = max(logits)
        w = [math.exp(v - mx) for v in logits]
        total = sum(w)
        expected = [sum(w[m] / total * y_s[m, c] for m in range(3)) for c in range(2)]
        assert rel_err(preds[i], expected) < 1e-10


def test_predict_rows_sum_to_one_and_permutation_invariant(rng):
    z_q = unit_rows(rng, 5, 4)
    z_s = unit_rows(rng, 6, 4)
    y_s = smooth_labels(rng.integers(0, 3, 6), 3, 0.1)
    preds = predict_classes(z_q, z_s, y_s, 0.1)
    np.testing.assert_allclose(preds.sum(axis=1), 1.0, atol=1e-6)
    perm = rng.permutation(6)
    preds_p = predict_classes(z_q, z_s[perm], y_s[perm], 0.1)
    np.testing.assert_allclose(preds, preds_p, atol=1e-12)


def test_predict_empty_prototypes(rng):
    with pytest.raises(ContractError):
        predict_classes(unit_rows(rng, 2, 3), np.zeros((0, 3)), np.zeros((0, 2)), 0.1)


# ----------------------------------------------------------------- sharpening

def test_sharpen_fixed_points_and_value():
    np.testing.assert_array_equal(sharpen(np.full(5, 0.2), 0.25), np.full(5, 0.2))
    np.testing.assert_array_equal(sharpen(np.array([0.0, 1.0, 0.0]), 0.25),
                                  np.array([0.0, 1.0, 0.0]))
    out = sharpen(np.array([0.6, 0.4]), 0.25)
    # direct evaluation: 0.6^4 / (0.6^4 + 0.4^4)
    np.testing.assert_allclose(out, [0.6 ** 4 / (0.6 ** 4 + 0.4 ** 4),
                                     0.4 ** 4 / (0.6 ** 4 + 0.4 ** 4)], atol=1e-12)
    assert out[0] == pytest.approx(0.8351, abs=1e-4)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8),
       st.floats(0.05, 0.99))
@settings(max_examples=200, deadline=None)
def test_sharpen_preserves_argmax_and_boosts_max(vals, T):
    p = np.array(vals) / np.sum(vals)
    out = sharpen(p, T)
    assert np.argmax(out) == np.argmax(p)
    assert out.max() >= p.max() - 1e-12
    assert abs(out.sum() - 1.0) < 1e-9


def test_joint_sharpen_equals_sharpen_on_equal_inputs(rng):
    for _ in range(200):
        p = simplex(rng, 6)
        np.testing.assert_allclose(joint_sharpen(p, p, 0.25), sharpen(p, 0.25),
                                   atol=1e-12, rtol=0)


def test_joint_sharpen_symmetric_products_are_uniform():
    p1 = np.array([0.7, 0.3])
    p2 = np.array([0.3, 0.7])
    for T in (0.1, 0.25, 0.9):
        np.testing.assert_allclose(joint_sharpen(p1, p2, T), [0.5, 0.5], atol=1e-12)


def test_joint_sharpen_direct_value():
    out = joint_sharpen(np.array([0.6, 0.4]), np.array([0.8, 0.2]), 0.25)
    expected = np.array([0.48 ** 2, 0.08 ** 2])
    expected /= expected.sum()
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert out[0] == pytest.approx(0.9730, abs=1e-4)


def test_joint_sharpen_disjoint_supports_degenerate():
    with pytest.raises(NumericError):
        joint_sharpen(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.25)


def test_pseudolabel_target_uniform_only_for_constant_products(rng):
    # collapse prevention: any non-constant product vector sharpens away from uniform
    for _ in range(100):
        p1, p2 = simplex(rng, 4), simplex(rng, 4)
        prod = p1 * p2
        t = joint_sharpen(p1, p2, 0.25)
        if np.ptp(prod) > 1e-9:
            assert np.ptp(t) > 0


# --------------------------------------------------------------------- labels

def test_smooth_labels():
    np.testing.assert_array_equal(smooth_labels(np.array([1]), 3, 0.0),
                                  np.array([[0.0, 1.0, 0.0]]))
    row = smooth_labels(np.array([3]), 10, 0.1)[0]
    assert row[3] == pytest.approx(0.91)
    assert row[0] == pytest.approx(0.01)
    out = smooth_labels(np.array([0, 2, 1]), 3, 0.37)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ContractError):
        smooth_labels(np.array([0]), 3, 1.0)


# ----------------------------------------------------------------------- loss

def _oracle_loss(p1, p2, ploc, cfg):
    """Literal transcription of the two loss formulas, explicit loops."""
    b, C = p1.shape
    n_loc = 0 if ploc is None else ploc.shape[1]
    if cfg.loss_mode == "pseudolabel":
        targets = []
        for i in range(b):
            t = np.array([(p1[i, c] * p2[i, c]) ** (1 / (2 * cfg.sharpen_T)) for c in range(C)])
            targets.append(t / t.sum())
        t1 = t2 = tloc = targets
        p_bar = np.mean(targets, axis=0)
    else:
        def rho(p):
            t = np.array([p[c] ** (1 / cfg.sharpen_T) for c in range(C)])
            return t / t.sum()
        t1 = [rho(p2[i]) for i in range(b)]
        t2 = [rho(p1[i]) for i in range(b)]
        tloc = [(t1[i] + t2[i]) / 2 for i in range(b)]
        p_bar = np.mean(t1 + t2, axis=0)
    total = 0.0
    for i in range(b):
        total += -sum(t1[i][c] * math.log(p1[i, c]) for c in range(C) if t1[i][c] > 0)
        total += -sum(t2[i][c] * math.log(p2[i, c]) for c in range(C) if t2[i][c] > 0)
        for l in range(n_loc):
            total += -sum(tloc[i][c] * math.log(ploc[i, l, c]) for c in range(C) if tloc[i][c] > 0)
    loss = total / ((2 + n_loc) * b)
    if cfg.me_max:
        loss -= -sum(v * math.log(v) for v in p_bar if v > 0)
    return loss


@pytest.mark.parametrize("mode", ["consistency", "pseudolabel"])
@pytest.mark.parametrize("with_local", [False, True])
def test_paws_loss_matches_transcription_oracle(rng, mode, with_local):
    cfg = PawsConfig(loss_mode=mode, me_max=True)
    p1, p2 = simplex(rng, 4, 3), simplex(rng, 4, 3)
    ploc = simplex(rng, 4, 2, 3) if with_local else None
    res = paws_loss(p1, p2, ploc, cfg)
    assert abs(res.loss - _oracle_loss(p1, p2, ploc, cfg)) < 1e-9


@pytest.mark.parametrize("mode", ["consistency", "pseudolabel"])
def test_paws_loss_gradients_match_finite_differences(rng, mode):
    cfg = PawsConfig(loss_mode=mode, me_max=True)
    p1, p2 = simplex(rng, 3, 4), simplex(rng, 3, 4)
    ploc = simplex(rng, 3, 2, 4)
    res = paws_loss(p1, p2, ploc, cfg)
    t1, t2, tloc, p_bar = paws_targets(p1, p2, cfg)

    def frozen_loss(q1, q2, ql):
        n_pairs = (2 + 2) * 3
        total = -np.sum(np.where(t1 > 0, t1 * np.log(q1), 0.0))
        total += -np.sum(np.where(t2 > 0, t2 * np.log(q2), 0.0))
        total += -np.sum(np.where(tloc[:, None, :] > 0, tloc[:, None, :] * np.log(ql), 0.0))
        loss = total / n_pairs
        loss -= -np.sum(p_bar * np.log(p_bar))
        return loss

    h = 1e-6
    for arr, grad, pick in ((p1, res.d_g1, 0), (p2, res.d_g2, 1), (ploc, res.d_local, 2)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            args = [p1.copy(), p2.copy(), ploc.copy()]
            args[pick][idx] += h
            up = frozen_loss(*args)
            args[pick][idx] -= 2 * h
            down = frozen_loss(*args)
            fd[idx] = (up - down) / (2 * h)
        assert rel_err(grad, fd, floor=1e-6) < 1e-4


def test_paws_loss_perfect_agreement_zero_ce():
    cfg = PawsConfig(loss_mode="consistency", me_max=False)
    one_hot = np.eye(3)[[0, 1, 2, 0]]
    res = paws_loss(one_hot, one_hot, None, cfg)
    assert res.loss == pytest.approx(0.0, abs=1e-12)
    cfg = PawsConfig(loss_mode="pseudolabel", me_max=False)
    assert paws_loss(one_hot, one_hot, None, cfg).loss == pytest.approx(0.0, abs=1e-12)


def test_paws_loss_me_max_uniform_floor():
    # one-hot per class: CE terms vanish and p_bar is uniform, so loss = -ln C
    cfg = PawsConfig(loss_mode="pseudolabel", me_max=True)
    one_hot = np.eye(4)
    res = paws_loss(one_hot, one_hot, None, cfg)
    assert res.loss == pytest.approx(-math.log(4), abs=1e-12)
    np.testing.assert_allclose(res.p_bar, 0.25, atol=1e-12)


def test_paws_loss_gradient_ignores_targets():
    # stop-gradient semantics: the me-max term contributes no gradient
    cfg = PawsConfig(loss_mode="pseudolabel", me_max=True)
    cfg_off = PawsConfig(loss_mode="pseudolabel", me_max=False)
    rng = np.random.default_rng(0)
    p1, p2 = simplex(rng, 4, 3), simplex(rng, 4, 3)
    on = paws_loss(p1, p2, None, cfg)
    off = paws_loss(p1, p2, None, cfg_off)
    np.testing.assert_array_equal(on.d_g1, off.d_g1)
    np.testing.assert_array_equal(on.d_g2, off.d_g2)
    assert on.loss != off.loss


# ------------------------------------------------------------------- sampling

def _toy_protos(n_classes=10, per_class=4):
    labels = np.repeat(np.arange(n_classes), per_class)
    indices = np.arange(labels.size)
    return PrototypeSet(indices, labels, smooth_labels(labels, n_classes, 0.1))


def test_stratified_batch_exhaustive():
    protos = _toy_protos()
    pos = stratified_batch(protos, 4, 10, np.random.default_rng(0))
    assert len(pos) == 40
    assert sorted(pos.tolist()) == list(range(40))
    counts = np.bincount(protos.labels[pos], minlength=10)
    np.testing.assert_array_equal(counts, 4)


def test_stratified_batch_deterministic():
    protos = _toy_protos()
    a = stratified_batch(protos, 2, 2, np.random.default_rng(3))
    b = stratified_batch(protos, 2, 2, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_stratified_batch_with_replacement_and_errors():
    protos = _toy_protos(per_class=2)
    pos = stratified_batch(protos, 5, 10, np.random.default_rng(0))
    assert len(pos) == 50
    with pytest.raises(ContractError):
        stratified_batch(protos, 2, 11, np.random.default_rng(0))


# ------------------------------------------------------------------- training

def _train_setup(seed=0, epochs=4, lr_scale=1.0, mode="pseudolabel"):
    ds = gen_mixture(MixtureSpec(n_classes=4, points_per_class=20, dim=10,
                                 class_kappa=600.0, view_kappa=250.0,
                                 n_global=2, n_local=2, seed=11))
    protos = PrototypeSet.from_dataset(ds, [0, 1, 20, 21, 40, 41, 60, 61], 0.1)
    cfg = PawsConfig(loss_mode=mode, unlabelled_batch_size=40, epochs=epochs,
                     n_local=2, per_class=2)
    rng = np.random.default_rng(seed)
    head = init_head(ds.dim, 8, 6, rng)
    steps = epochs * 2
    sched = LrSchedule(0.3 * lr_scale, 6.4 * lr_scale, 0.064 * lr_scale,
                       max(1, steps // 10), steps)
    return ds, protos, cfg, head, LarsState.init(head), sched, rng


def test_train_paws_tiny_lr_keeps_head_and_accuracy():
    ds, protos, cfg, head, state, sched, rng = _train_setup(lr_scale=1e-30)
    acc0 = prototype_accuracy(head, ds, protos, ds, cfg.tau)
    trained, history = train_paws(ds, protos, head.copy(), cfg, state, sched, rng, val_ds=ds)
    for a, b in zip(trained.weights + trained.biases, head.weights + head.biases):
        np.testing.assert_allclose(a, b, atol=1e-25)
    assert history.records[-1]["val_acc"] == pytest.approx(acc0, abs=1e-12)


def test_train_paws_deterministic():
    out = []
    for _ in range(2):
        ds, protos, cfg, head, state, sched, rng = _train_setup(seed=5)
        _, history = train_paws(ds, protos, head, cfg, state, sched, rng, val_ds=ds)
        out.append(history.records)
    assert out[0] == out[1]


def test_train_paws_learns_separable_mixture():
    ds, protos, cfg, head, state, sched, rng = _train_setup(epochs=10)
    trained, history = train_paws(ds, protos, head, cfg, state, sched, rng, val_ds=ds)
    accs = [r["val_acc"] for r in history.records]
    assert accs[-1] >= 0.9


def test_prototype_set_validation():
    with pytest.raises(ContractError):
        PrototypeSet(np.array([0, 0]), np.array([0, 1]),
                     smooth_labels(np.array([0, 1]), 2, 0.0))
