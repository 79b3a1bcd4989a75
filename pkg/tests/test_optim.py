import math

import numpy as np
import pytest

from htlab.data import Dataset
from htlab.losses import CompositeLoss, LossSpec, cross_entropy
from htlab.model import FreezeMask, MlpSpec, backward, forward, group_of, init_model, params_axpy
from htlab.numkit import Rng
from htlab.optim import (
    LolConfig,
    SgdConfig,
    SwaConfig,
    lolsgd_round,
    sgd_step,
    swa_average,
    train_lolsgd,
    train_sgd,
)

SPEC = MlpSpec((4, 8, 3))
PLAIN_LOSS = CompositeLoss(LossSpec())


def _toy_dataset(n_per=20, dim=4, classes=3, sep=6.0, seed=70):
    rng = Rng(seed)
    means = rng.derive("m").standard_normal((classes, dim))
    means *= sep / np.linalg.norm(means, axis=1, keepdims=True)
    X = np.concatenate([means[c] + rng.derive(f"c{c}").standard_normal((n_per, dim))
                        for c in range(classes)])
    y = np.repeat(np.arange(classes), n_per)
    return Dataset(X, y, classes)


def _grads_for(params, X, y, mask=None):
    mask = mask or FreezeMask.all_trainable()
    trace = forward(params, X, mode="train", update_stats=False)
    _, g = cross_entropy(trace.logits, y)
    return backward(params, trace, g, mask)


# ------------------------------------------------------------ sgd_step

def test_sgd_step_vanilla_is_plain_descent():
    params = init_model(SPEC, Rng(71))
    ds = _toy_dataset()
    grads = _grads_for(params, ds.X[:8], ds.y[:8])
    cfg = SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.0)
    before = params.clone()
    sgd_step(params, grads, {}, cfg, FreezeMask.all_trainable())
    for k in params.keys():
        assert np.array_equal(params[k], before[k] - 0.1 * grads[k])


def test_sgd_step_zero_grad_is_noop():
    params = init_model(SPEC, Rng(72))
    zeros = {k: np.zeros_like(params[k]) for k in params.keys()}
    before = params.clone()
    sgd_step(params, zeros, {}, SgdConfig(lr=0.5, momentum=0.9, weight_decay=0.0),
             FreezeMask.all_trainable())
    for k in params.keys():
        assert np.array_equal(params[k], before[k])


def test_sgd_step_momentum_matches_hand_recurrence():
    params = init_model(SPEC, Rng(73))
    ds = _toy_dataset()
    cfg = SgdConfig(lr=0.05, momentum=0.9, weight_decay=0.0)
    mask = FreezeMask.all_trainable()
    g1 = _grads_for(params, ds.X[:8], ds.y[:8])
    hand = {k: params[k].copy() for k in params.keys()}
    state = {}
    sgd_step(params, g1, state, cfg, mask)
    g2 = _grads_for(params, ds.X[8:16], ds.y[8:16])
    sgd_step(params, g2, state, cfg, mask)
    # hand-unrolled: v1 = g1; p1 = p0 - lr v1; v2 = 0.9 v1 + g2; p2 = p1 - lr v2
    for k in hand:
        v1 = g1[k]
        p1 = hand[k] - 0.05 * v1
        v2 = 0.9 * v1 + g2[k]
        p2 = p1 - 0.05 * v2
        assert np.max(np.abs(params[k] - p2)) < 1e-15


def test_sgd_step_weight_decay_skips_biases_and_norm_affine():
    spec = MlpSpec((4, 8, 3), use_batchnorm=True, use_in_adapter=True)
    params = init_model(spec, Rng(74))
    params["layers.0.b"] += 1.0
    params["bn.0.gamma"] *= 2.0
    params["in_adapter.scale"] *= 3.0
    zeros = {k: np.zeros_like(params[k]) for k in params.keys()}
    before = params.clone()
    sgd_step(params, zeros, {}, SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.1),
             FreezeMask.all_trainable())
    assert np.array_equal(params["layers.0.b"], before["layers.0.b"])
    assert np.array_equal(params["bn.0.gamma"], before["bn.0.gamma"])
    assert np.array_equal(params["in_adapter.scale"], before["in_adapter.scale"])
    assert not np.array_equal(params["layers.0.W"], before["layers.0.W"])


def test_sgd_step_frozen_group_untouched():
    params = init_model(SPEC, Rng(75))
    ds = _toy_dataset()
    grads = _grads_for(params, ds.X[:8], ds.y[:8], FreezeMask.frozen_classifier())
    before = params.clone()
    state = {}
    for _ in range(5):
        sgd_step(params, grads, state, SgdConfig(lr=0.1, weight_decay=1e-2),
                 FreezeMask.frozen_classifier())
    assert np.array_equal(params["layers.1.W"], before["layers.1.W"])
    assert np.array_equal(params["layers.1.b"], before["layers.1.b"])


# ------------------------------------------------------------ train_sgd

def test_train_sgd_zero_epochs_returns_input():
    params = init_model(SPEC, Rng(76))
    ds = _toy_dataset()
    out, curve = train_sgd(params, ds, PLAIN_LOSS, SgdConfig(epochs=0),
                           FreezeMask.all_trainable(), Rng(1))
    assert curve == []
    for k in params.keys():
        assert np.array_equal(out[k], params[k])


def test_train_sgd_deterministic():
    params = init_model(SPEC, Rng(77))
    ds = _toy_dataset()
    cfg = SgdConfig(lr=0.05, epochs=3, batch_size=16)
    a, ca = train_sgd(params, ds, PLAIN_LOSS, cfg, FreezeMask.all_trainable(), Rng(5))
    b, cb = train_sgd(params, ds, PLAIN_LOSS, cfg, FreezeMask.all_trainable(), Rng(5))
    assert ca == cb
    for k in a.keys():
        assert np.array_equal(a[k], b[k])


def test_train_sgd_loss_decreases_on_separable_data():
    params = init_model(SPEC, Rng(78))
    ds = _toy_dataset(sep=8.0)
    cfg = SgdConfig(lr=0.01, momentum=0.0, weight_decay=0.0,
                    batch_size=len(ds), epochs=20)
    _, curve = train_sgd(params, ds, PLAIN_LOSS, cfg, FreezeMask.all_trainable(), Rng(6))
    assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))
    assert curve[-1] < curve[0]


def test_train_sgd_freeze_commutes_with_training():
    params = init_model(SPEC, Rng(79))
    ds = _toy_dataset()
    cfg = SgdConfig(lr=0.1, epochs=4, batch_size=8, weight_decay=1e-3)
    out, _ = train_sgd(params, ds, PLAIN_LOSS, cfg, FreezeMask.frozen_classifier(), Rng(7))
    assert np.array_equal(out["layers.1.W"], params["layers.1.W"])
    assert np.array_equal(out["layers.1.b"], params["layers.1.b"])
    assert not np.array_equal(out["layers.0.W"], params["layers.0.W"])


# ------------------------------------------------------------ lolsgd

def test_lolsgd_degenerates_to_single_sgd_step():
    # M=1, leave_k=0, one-minibatch budget covering the whole set, outer=1
    params = init_model(SPEC, Rng(80))
    ds = _toy_dataset(n_per=8)  # 24 samples
    cfg = SgdConfig(lr=0.05, momentum=0.9, weight_decay=0.0, batch_size=24, epochs=1)
    lol = LolConfig(subsets=1, leave_k=0, local_budget=1.0, outer_step=1.0)
    mask = FreezeMask.all_trainable()
    out = lolsgd_round(params, ds, PLAIN_LOSS, cfg, lol, mask, Rng(8))

    # reference: one sgd_step on the same (full) batch
    sub_rng = Rng(8).derive("subset-0").derive("batches")
    pick = sub_rng.choice(24, size=24, replace=False)
    ref = params.clone()
    grads = _grads_for(ref, ds.X[pick], ds.y[pick])
    sgd_step(ref, grads, {}, cfg, mask)
    for k in ref.keys():
        assert np.max(np.abs(out[k] - ref[k])) <= 1e-12


def test_lolsgd_default_recipe_accepted():
    params = init_model(SPEC, Rng(81))
    ds = _toy_dataset(n_per=12, classes=3)
    cfg = SgdConfig(lr=0.02, batch_size=8, epochs=1)
    lol = LolConfig(subsets=10, leave_k=2)  # < 3 classes present
    out = lolsgd_round(params, ds, PLAIN_LOSS, cfg, lol,
                       FreezeMask.frozen_classifier(), Rng(9))
    assert not np.array_equal(out["layers.0.W"], params["layers.0.W"])


def test_lolsgd_rejects_leaving_out_everything():
    params = init_model(SPEC, Rng(82))
    ds = _toy_dataset(classes=3)
    with pytest.raises(ValueError, match="leave_k"):
        lolsgd_round(params, ds, PLAIN_LOSS, SgdConfig(), LolConfig(leave_k=3),
                     FreezeMask.all_trainable(), Rng(10))


def test_lolsgd_frozen_groups_bitwise_invariant():
    params = init_model(SPEC, Rng(83))
    ds = _toy_dataset()
    cfg = SgdConfig(lr=0.1, batch_size=8, epochs=1)
    out = lolsgd_round(params, ds, PLAIN_LOSS, cfg, LolConfig(subsets=4, leave_k=1),
                       FreezeMask.frozen_classifier(), Rng(11))
    assert np.array_equal(out["layers.1.W"], params["layers.1.W"])
    assert np.array_equal(out["layers.1.b"], params["layers.1.b"])


def test_lolsgd_deterministic_per_seed():
    params = init_model(SPEC, Rng(84))
    ds = _toy_dataset()
    cfg = SgdConfig(lr=0.05, batch_size=16, epochs=2)
    lol = LolConfig(subsets=5, leave_k=1)
    a, ca = train_lolsgd(params, ds, PLAIN_LOSS, cfg, lol,
                         FreezeMask.all_trainable(), Rng(12))
    b, cb = train_lolsgd(params, ds, PLAIN_LOSS, cfg, lol,
                         FreezeMask.all_trainable(), Rng(12))
    assert ca == cb
    for k in a.keys():
        assert np.array_equal(a[k], b[k])


def test_lolsgd_budget_matches_sgd():
    params = init_model(SPEC, Rng(85))
    ds = _toy_dataset(n_per=20)  # 60 samples
    cfg = SgdConfig(lr=0.02, batch_size=16, epochs=5)
    lol = LolConfig(subsets=10, leave_k=1)
    count = {"sgd": 0, "lol": 0}
    train_sgd(params, ds, PLAIN_LOSS, cfg, FreezeMask.all_trainable(), Rng(13),
              on_step=lambda p: count.__setitem__("sgd", count["sgd"] + 1))
    train_lolsgd(params, ds, PLAIN_LOSS, cfg, lol, FreezeMask.all_trainable(), Rng(13),
                 on_step=lambda p: count.__setitem__("lol", count["lol"] + 1))
    assert count["sgd"] == cfg.epochs * math.ceil(60 / 16)
    assert abs(count["lol"] - count["sgd"]) <= lol.subsets


def test_lolsgd_zero_lr_local_runs_leave_params_fixed():
    # lr -> tiny makes every local displacement negligible; with exact-zero
    # displacement the round must return the snapshot bitwise, which we get
    # by freezing every gradient group
    params = init_model(MlpSpec((4, 8, 3), use_batchnorm=True), Rng(86))
    ds = _toy_dataset()
    cfg = SgdConfig(lr=0.1, batch_size=8, epochs=1)
    mask = FreezeMask(backbone=False, classifier=False, bn_affine=False,
                      bn_stats=False, in_adapter=False)
    out = lolsgd_round(params, ds, PLAIN_LOSS, cfg, LolConfig(subsets=3, leave_k=1),
                       mask, Rng(14))
    for k in params.keys():
        assert np.array_equal(out[k], params[k])


# ------------------------------------------------------------ swa

def test_swa_single_checkpoint_is_identity():
    p = init_model(SPEC, Rng(87))
    avg = swa_average([p])
    for k in p.keys():
        assert np.array_equal(avg[k], p[k])


def test_swa_two_checkpoints_is_midpoint():
    a = init_model(SPEC, Rng(88))
    b = init_model(SPEC, Rng(89))
    avg = swa_average([a, b])
    mid = params_axpy(0.5, a, 0.5, b)
    for k in a.keys():
        assert np.array_equal(avg[k], mid[k])


def test_swa_identical_checkpoints_idempotent():
    p = init_model(SPEC, Rng(90))
    avg = swa_average([p, p, p, p, p])
    for k in p.keys():
        scale = np.maximum(np.abs(p[k]), 1.0)
        assert np.max(np.abs(avg[k] - p[k]) / scale) < 1e-15


def test_swa_empty_stream_rejected():
    with pytest.raises(ValueError, match="empty"):
        swa_average([])


def test_swa_config_validation():
    with pytest.raises(ValueError):
        SwaConfig(cadence="weekly")


# ------------------------------------------------------------ config validation

def test_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(lr=0.0)
    with pytest.raises(ValueError):
        SgdConfig(momentum=1.0)
    with pytest.raises(ValueError):
        LolConfig(subsets=0)
    with pytest.raises(ValueError):
        LolConfig(outer_step=0.0)
