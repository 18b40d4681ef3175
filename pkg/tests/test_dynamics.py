import logging
import math

import numpy as np
import pytest

from ampo import numcore as nc
from ampo.dyna import ReplayBuffer
from ampo.dynamics import (DynamicsEnsemble, ModelConfig, decode, extract_features, nll_loss, nll_value, predict,
                           sample_next, GaussianHead, train_ensemble)
from ampo.errors import UsageError

from conftest import central_fd, rel_err

SMALL = ModelConfig(ensemble_size=2, hidden=(8, 6))


def linear_buffer(n, rng, noise=0.05, obs_dim=2):
    A = np.array([[0.9, 0.1], [-0.2, 0.8]])
    B = np.array([[0.5], [-0.3]])
    c = np.array([1.0, -0.5])
    buf = ReplayBuffer(n, obs_dim, 1)
    s = rng.normal(size=(n, obs_dim))
    a = rng.uniform(-1, 1, size=(n, 1))
    s_next = s @ A.T + a @ B.T + noise * rng.normal(size=(n, obs_dim))
    r = s @ c + noise * rng.normal(size=n)
    buf.add_batch(s, a, s_next, r)
    return buf


def test_nll_zero_residual_identity_covariance():
    t = np.array([[0.3, -1.0]])
    assert nll_value(t, np.zeros((1, 2)), t)[0] == 0.0


def test_nll_zero_residual_e_squared_variances():
    t = np.zeros((1, 2))
    assert nll_value(t, np.full((1, 2), 2.0), t)[0] == pytest.approx(4.0, abs=1e-15)


def test_nll_matches_matrix_formula():
    rng = np.random.default_rng(0)
    mean, target = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    logvar = rng.uniform(-3, 1, size=(6, 3))
    want = []
    for m, lv, t in zip(mean, logvar, target):
        cov = np.diag(np.exp(lv))
        d = m - t
        want.append(d @ np.linalg.inv(cov) @ d + np.linalg.slogdet(cov)[1])
    np.testing.assert_allclose(nll_value(mean, logvar, target), want, rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_member_gradients_match_finite_differences(seed):
    ens = DynamicsEnsemble(3, 1, SMALL, seed=seed)
    member = ens.members[0]
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    _, g_ext, g_dec = nll_loss(member, x, y)

    def total():
        loss, _, _ = nll_loss(member, x, y, with_grads=False)
        dec = member.decoder
        return loss + 0.01 * (dec["max_logvar"].sum() - dec["min_logvar"].sum())

    for store, grads in ((member.extractor, g_ext), (member.decoder, g_dec)):
        for name in store.names:
            assert rel_err(grads[name], central_fd(total, store[name])) < 1e-4, name


def test_linear_gaussian_fit_reaches_noise_floor():
    rng = np.random.default_rng(0)
    noise = 0.05
    cfg = ModelConfig(ensemble_size=3, hidden=(32, 32))
    ens = DynamicsEnsemble(2, 1, cfg, seed=0)
    buf = linear_buffer(4000, rng, noise)
    for _ in range(8):
        train_ensemble(ens, buf, rng=rng)
    held = linear_buffer(2000, np.random.default_rng(1), noise).all()
    for i in range(ens.n_members):
        head = predict(ens, i, held.s, held.a)
        err = np.concatenate([head.next_state_mean - held.s_next, (head.reward_mean - held.r)[:, None]], axis=1)
        assert float((err ** 2).mean()) <= 1.5 * noise ** 2


def test_training_is_deterministic():
    def once():
        rng = np.random.default_rng(3)
        ens = DynamicsEnsemble(2, 1, SMALL, seed=4)
        return train_ensemble(ens, linear_buffer(300, np.random.default_rng(5)), rng=rng)

    a, b = once(), once()
    assert [m.val_loss for m in a.members] == [m.val_loss for m in b.members]
    assert [m.train_loss for m in a.members] == [m.train_loss for m in b.members]


def test_early_stopping_restores_best():
    rng = np.random.default_rng(0)
    ens = DynamicsEnsemble(2, 1, ModelConfig(ensemble_size=3, hidden=(16, 16), patience=5), seed=0)
    report = train_ensemble(ens, linear_buffer(500, rng), rng=rng)
    for m in report.members:
        assert m.val_loss <= m.val_loss_before
        assert not m.regressed
        assert m.steps - m.best_step <= 5 or m.steps == ens.config.max_steps
    assert report.n_val == 50


def test_too_little_data_is_rejected():
    with pytest.raises(UsageError):
        train_ensemble(DynamicsEnsemble(2, 1, SMALL), linear_buffer(10, np.random.default_rng(0)))


def test_constant_system_predicts_zero_delta():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(1000, 2, 1)
    s = rng.normal(size=(1000, 2))
    buf.add_batch(s, rng.uniform(-1, 1, size=(1000, 1)), s.copy() + 1e-3 * rng.normal(size=(1000, 2)),
                  np.zeros(1000))
    ens = DynamicsEnsemble(2, 1, ModelConfig(ensemble_size=2, hidden=(16, 16)), seed=1)
    for _ in range(3):
        train_ensemble(ens, buf, rng=rng)
    head = predict(ens, 0, s[:200], np.zeros((200, 1)))
    delta = head.mean[:, :2]
    assert np.all(np.abs(delta) <= 3 * np.sqrt(head.var[:, :2]))


def test_predict_is_deterministic_and_checks_index():
    ens = DynamicsEnsemble(2, 1, SMALL, seed=0)
    s, a = np.ones((3, 2)), np.zeros((3, 1))
    h1, h2 = predict(ens, 1, s, a), predict(ens, 1, s, a)
    assert np.array_equal(h1.mean, h2.mean) and np.array_equal(h1.logvar, h2.logvar)
    with pytest.raises(UsageError):
        predict(ens, 2, s, a)
    with pytest.raises(UsageError):
        predict(ens, -1, s, a)


def test_logvar_soft_clamp_holds_under_extreme_inputs():
    ens = DynamicsEnsemble(2, 1, SMALL, seed=0)
    member = ens.members[0]
    member.decoder["W0"][:] = 1e6
    for sign in (1.0, -1.0):
        member.decoder["b0"][:] = sign * 1e8
        _, logvar = decode(member, np.ones((4, 6)))
        assert np.all(logvar <= SMALL.logvar_max) and np.all(logvar >= SMALL.logvar_min)
        assert np.all(np.isfinite(np.exp(logvar))) and np.all(np.exp(logvar) > 0)


def head(mean, logvar):
    return GaussianHead(np.asarray(mean, float), np.asarray(logvar, float), np.zeros((len(mean), len(mean[0]) - 1)))


def test_sample_next_degenerate_variance():
    h = head([[0.5, -1.0, 2.0]], np.full((1, 3), -10.0))
    s, r = sample_next(h, 0)
    assert np.all(np.abs(np.append(s, r) - h.mean[0]) <= math.exp(-5.0) * 6)


def test_sample_next_moments_and_seed():
    n = 10_000
    mean = np.tile([[1.0, -2.0, 0.5]], (n, 1))
    logvar = np.tile(np.log([[0.25, 1.0, 4.0]]), (n, 1))
    s, r = sample_next(head(mean, logvar), 7)
    draws = np.column_stack([s, r])
    np.testing.assert_allclose(draws.mean(0), mean[0], atol=float(4 * np.sqrt(np.exp(logvar[0]).max() / n)))
    np.testing.assert_allclose(draws.var(0), np.exp(logvar[0]), rtol=0.06)
    cov = np.cov(draws.T)
    assert np.all(np.abs(cov[~np.eye(3, dtype=bool)]) < 0.06)
    s2, r2 = sample_next(head(mean, logvar), 7)
    assert np.array_equal(s, s2) and np.array_equal(r, r2)


def test_features_ignore_decoder_and_match_forward():
    ens = DynamicsEnsemble(2, 1, SMALL, seed=0)
    member = ens.members[0]
    s, a = np.random.default_rng(0).normal(size=(5, 2)), np.ones((5, 1))
    h = extract_features(member, s, a, ens)
    member.decoder.flat[:] = 3.0
    assert np.array_equal(h, extract_features(member, s, a, ens))
    assert h.shape == (5, SMALL.hidden[-1]) == (5, member.feature_dim)
    x = np.concatenate([s, a], axis=1)
    e = member.extractor
    want = np.tanh(np.tanh(x @ e["W0"] + e["b0"]) @ e["W1"] + e["b1"])
    np.testing.assert_allclose(h, want, atol=1e-14)


def test_prediction_is_decoder_of_features():
    ens = DynamicsEnsemble(2, 1, SMALL, seed=0)
    train_ensemble(ens, linear_buffer(200, np.random.default_rng(0)), rng=0)
    s, a = np.ones((3, 2)), np.zeros((3, 1))
    member = ens.members[1]
    mean, logvar = decode(member, extract_features(member, s, a, ens))
    h = predict(ens, 1, s, a)
    assert np.array_equal(h.mean, mean * ens.target_std + ens.target_mean)
    assert np.array_equal(h.logvar, logvar + 2 * np.log(ens.target_std))


def test_bootstrap_leaves_out_about_one_over_e():
    cfg = ModelConfig(ensemble_size=7, hidden=(4, 4), max_steps=1)
    ens = DynamicsEnsemble(2, 1, cfg, seed=0)
    n = 3000
    report = train_ensemble(ens, linear_buffer(n, np.random.default_rng(0)), rng=1)
    for boot in ens.bootstrap_assignments:
        absent = 1 - len(np.unique(boot)) / report.n_train
        assert abs(absent - math.exp(-1)) < 0.03


def test_members_start_different():
    ens = DynamicsEnsemble(2, 1, SMALL, seed=0)
    assert not np.array_equal(ens.members[0].extractor.flat, ens.members[1].extractor.flat)


def test_constant_input_dimension_warns(caplog):
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(100, 2, 1)
    s = np.column_stack([rng.normal(size=100), np.full(100, 3.0)])
    buf.add_batch(s, rng.normal(size=(100, 1)), s, rng.normal(size=100))
    ens = DynamicsEnsemble(2, 1, SMALL, seed=0)
    with caplog.at_level(logging.WARNING, logger="ampo.dynamics"):
        train_ensemble(ens, buf, rng=0)
    assert any("zero spread in input" in r.message for r in caplog.records)
    assert ens.input_mean[0, 1] == 0.0 and ens.input_std[0, 1] == 1.0
