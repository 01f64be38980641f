import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strsparse import kernel as K
from strsparse.data import gaussian_blobs
from strsparse.kernel import SIGMOID, StrParam
from strsparse.layers import build_mlp
from strsparse.optim import SGD, TrainConfig, TrainingDiverged, cosine_lr, s_update, sgd_step, train
from strsparse.params import Parameter
from strsparse.tensor import DimensionError


def small_cfg(**kw):
    base = dict(lam=1e-3, s_init=-5.0, base_lr=0.05, batch_size=32, epochs=3, warmup_epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- sgd_step / s update -----------------------------------------------------------------

@given(st.floats(-10, 10), st.floats(0, 1), st.floats(0, 1))
def test_pure_decay_factor(p, lr, lam):
    new, _ = sgd_step(np.array([p]), np.zeros(1), np.zeros(1), lr, lam, 0.0)
    assert new[0] == pytest.approx((1 - lr * lam) * p, rel=1e-12, abs=1e-300)


def test_plain_gradient_descent():
    new, v = sgd_step(np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.zeros(2), 0.1, 0.0, 0.0)
    np.testing.assert_allclose(new, [0.95, 2.1])
    np.testing.assert_allclose(v, [0.5, -1.0])


def test_two_momentum_steps_hand_unrolled():
    p0, g1, g2, lr, lam, m = 1.0, 0.3, -0.2, 0.1, 0.01, 0.9
    v1 = g1 + lam * p0
    p1 = p0 - lr * v1
    v2 = m * v1 + (g2 + lam * p1)
    p2 = p1 - lr * v2
    p, v = sgd_step(np.array([p0]), np.array([g1]), np.zeros(1), lr, lam, m)
    p, v = sgd_step(p, np.array([g2]), v, lr, lam, m)
    assert p[0] == pytest.approx(p2, rel=1e-14)


def test_sgd_step_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.0, 0.0)


def test_s_update_formula():
    s, P, lr, lam = np.array([-2.0]), 0.7, 0.05, 1e-3
    gp = float(K.g_prime(SIGMOID, s)[0])
    new, _ = s_update(s, -gp * P, lr, lam)
    assert new[0] == pytest.approx(s[0] + lr * gp * P - lr * lam * s[0], abs=1e-12)


def test_s_update_with_no_surviving_weights():
    s = np.array([-3.0])
    assert s_update(s, 0.0, 0.1, 0.01)[0][0] == pytest.approx((1 - 0.1 * 0.01) * -3.0)
    assert s_update(s, 0.0, 0.1, 0.0)[0][0] == -3.0


def test_sgd_respects_decay_and_trainable_flags():
    a = Parameter(np.ones(2), "a")
    b = Parameter(np.ones(2), "b", decay=False)
    c = Parameter(np.ones(2), "c", trainable=False)
    opt = SGD([a, b, c, a], lam=0.5, momentum=0.0)
    assert [p.name for p in opt.params] == ["a", "b"]
    opt.step(0.1)
    np.testing.assert_allclose(a.value, 0.95)
    np.testing.assert_array_equal(b.value, 1.0)
    np.testing.assert_array_equal(c.value, 1.0)


# -- cosine schedule ------------------------------------------------------------------------

def test_cosine_lr_landmarks():
    total, warm, base = 110, 10, 0.4
    assert cosine_lr(9, total, warm, base) == base
    assert cosine_lr(0, total, warm, base) == pytest.approx(base / warm)
    assert cosine_lr(60, total, warm, base) == pytest.approx(0.5 * base)
    last = cosine_lr(total - 1, total, warm, base)
    assert 0 < last <= base * (1 - math.cos(math.pi / 100)) / 2
    assert cosine_lr(0, 10, 0, base) == base


def test_cosine_lr_is_monotone_after_warmup():
    lrs = [cosine_lr(t, 50, 5, 1.0) for t in range(50)]
    assert all(a <= b for a, b in zip(lrs[:5], lrs[1:6]))
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))


def test_cosine_lr_range_errors():
    with pytest.raises(ValueError):
        cosine_lr(10, 10, 2, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(-1, 10, 2, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(0, 10, 10, 0.1)


# -- config ----------------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(lam=-1.0), dict(epochs=0), dict(warmup_epochs=20), dict(batch_size=0),
                                 dict(base_lr=0.0), dict(momentum=1.0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_train_config_replace():
    c = TrainConfig().replace(lam=0.5)
    assert c.lam == 0.5 and c.epochs == TrainConfig().epochs
    assert "s_init" in TrainConfig.field_names()


# -- training loop --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def blobs():
    (X, y), (Xt, yt) = gaussian_blobs(n=400, seed=1)
    return X, y, Xt, yt


def test_train_is_deterministic(blobs):
    X, y, Xt, yt = blobs
    reps = []
    for _ in range(2):
        m = build_mlp([16, 16, 4], seed=3)
        reps.append(train(m, X, y, small_cfg(), eval_data=(Xt, yt)))
    assert reps[0].to_csv() == reps[1].to_csv()


def test_report_columns(blobs):
    X, y, Xt, yt = blobs
    m = build_mlp([16, 16, 4], seed=3)
    rep = train(m, X, y, small_cfg())
    assert rep.header == ["epoch", "loss", "acc", "sparsity", "alpha_fc1", "alpha_fc2"]
    assert len(rep.rows) == 3
    assert rep.column("epoch") == [1, 2, 3]
    assert rep.final_sparsity == pytest.approx(m.overall_sparsity())
    assert rep.final_alphas == [K.threshold_summary(p) for _, p in m.str_params()]
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(rep.header) and len(lines) == 4


def test_dense_limit_has_no_sparsity(blobs):
    X, y, Xt, yt = blobs
    m = build_mlp([16, 16, 4], s_init=-1000.0, seed=3)
    rep = train(m, X, y, small_cfg(lam=0.0, s_init=-1000.0), eval_data=(Xt, yt))
    assert rep.final_sparsity == 0.0
    assert rep.final_accuracy > 0.8


def test_overall_sparsity_matches_budget_accounting(blobs):
    from strsparse.budget import report_from_model

    X, y, _, _ = blobs
    m = build_mlp([16, 16, 4], seed=3)
    rep = train(m, X, y, small_cfg(lam=5e-2))
    bud = report_from_model(m)
    assert bud.overall.sparsity_pct == pytest.approx(100 * rep.final_sparsity, abs=1e-12)


def test_nan_names_offending_parameter(blobs):
    X, y, _, _ = blobs
    m = build_mlp([16, 8, 4], seed=0)
    m.layers[0].weight.value[0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="fc1.weight"):
        train(m, X, y, small_cfg())


def test_nan_from_overflow_names_layer(blobs):
    X, y, _, _ = blobs
    m = build_mlp([16, 8, 4], seed=0)
    with pytest.raises(TrainingDiverged, match="fc"):
        train(m, X * 1e300, y, small_cfg())


def test_train_input_errors(blobs):
    X, y, _, _ = blobs
    m = build_mlp([16, 8, 4])
    with pytest.raises(ValueError):
        train(m, X[:0], y[:0], small_cfg())
    with pytest.raises(DimensionError):
        train(m, X, y[:-1], small_cfg())


def test_frozen_threshold_does_not_move(blobs):
    X, y, _, _ = blobs
    m = build_mlp([16, 8, 4], s_init=-2.0, seed=0, freeze_thresholds=True)
    train(m, X, y, small_cfg(lam=0.1))
    assert all(np.all(p.s == -2.0) for _, p in m.str_params())


def test_thresholds_grow_under_decay(blobs):
    X, y, _, _ = blobs
    m = build_mlp([16, 16, 4], s_init=-5.0, seed=0)
    rep = train(m, X, y, small_cfg(lam=5e-2, epochs=5))
    first, last = rep.rows[0][4], rep.rows[-1][4]
    assert all(b > a for a, b in zip(first, last))
