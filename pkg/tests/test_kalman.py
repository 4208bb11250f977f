import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enkf_lab import kalman
from enkf_lab.kalman import KalmanState, a_hat, gain, kf_predict, kf_run, kf_update, r_hat
from enkf_lab.linalg import loewner_leq, principal_sqrt, random_spd
from enkf_lab.model import scalar_model, validate
from conftest import random_model

seeds = st.integers(0, 2**32 - 1)

GOLDEN_RATIO = (1 + np.sqrt(5)) / 2


def test_gain_examples(golden, rng):
    assert np.all(gain(golden, np.zeros((1, 1))) == 0)
    assert gain(golden, np.eye(1))[0, 0] == pytest.approx(0.5)
    m = random_model(rng, 3, 2)
    p = random_spd(rng, 3)
    np.testing.assert_allclose(gain(m, p) @ m.b, np.eye(3) - a_hat(m, p), atol=1e-10)


def test_a_hat_examples(golden, rng):
    np.testing.assert_allclose(a_hat(golden, np.zeros((1, 1))), np.eye(1))
    assert a_hat(golden, np.eye(1))[0, 0] == pytest.approx(0.5)
    m = random_model(rng, 3)
    p = random_spd(rng, 3)
    ap = a_hat(m, p) @ p
    np.testing.assert_allclose(ap, ap.T, atol=1e-10)
    assert loewner_leq(ap, p, tol=1e-10)
    assert np.linalg.eigvalsh((ap + ap.T) / 2)[0] >= -1e-10


def test_r_hat_examples(golden, rng):
    assert r_hat(golden, np.zeros((1, 1)))[0, 0] == 0.0
    assert r_hat(golden, np.eye(1))[0, 0] == pytest.approx(0.25)
    m = random_model(rng, 3, 2)
    p = random_spd(rng, 3)
    ah = a_hat(m, p)
    np.testing.assert_allclose(ah @ p, ah @ p @ ah.T + r_hat(m, p), atol=1e-10)


def test_update_with_zero_observation_matrix():
    m = validate([[1.0]], [[0.0]], [[1.0]], [[1.0]], [[2.0]])
    s = KalmanState(0, np.array([0.3]), np.array([[2.0]]))
    u = kf_update(m, s, [5.0])
    assert u.upd_mean[0] == 0.3 and u.upd_cov[0, 0] == 2.0


def test_scalar_update_and_predict_by_hand(golden):
    s = KalmanState(0, np.zeros(1), np.eye(1))
    u = kf_update(golden, s, [2.0])
    assert u.upd_mean[0] == pytest.approx(1.0)
    assert u.upd_cov[0, 0] == pytest.approx(0.5)
    nxt = kf_predict(golden, u)
    assert nxt.pred_cov[0, 0] == pytest.approx(1.5)


def test_zero_innovation_keeps_mean(rng):
    m = random_model(rng, 2)
    x = rng.standard_normal(2)
    s = KalmanState(0, x, random_spd(rng, 2))
    np.testing.assert_allclose(kf_update(m, s, m.b @ x).upd_mean, x, atol=1e-12)


def test_predict_edge_cases(rng):
    m = validate(np.zeros((2, 2)), np.eye(2), 2 * np.eye(2), np.eye(2), np.eye(2))
    s = kf_update(m, KalmanState(0, np.zeros(2), np.eye(2)), np.zeros(2))
    np.testing.assert_allclose(kf_predict(m, s).pred_cov, m.r)
    s0 = KalmanState(0, np.zeros(2), np.eye(2), np.zeros(2), np.zeros((2, 2)))
    np.testing.assert_allclose(kf_predict(random_model(rng, 2).replace(r=m.r), s0).pred_cov, m.r)
    with pytest.raises(ValueError):
        kf_predict(m, KalmanState(0, np.zeros(2), np.eye(2)))


def test_kf_run_examples(golden):
    traj = kf_run(golden, np.empty((0, 1)))
    assert len(traj) == 1 and traj[0].pred_cov[0, 0] == 1.0
    traj = kf_run(golden, np.zeros(51))
    assert traj[50].pred_cov[0, 0] == pytest.approx(GOLDEN_RATIO, abs=1e-9)


def test_kf_run_without_observation_is_lyapunov_recursion(rng):
    a = 0.7 * np.linalg.qr(rng.standard_normal((2, 2)))[0]
    m = validate(a, np.zeros((1, 2)), np.eye(2), np.eye(1), 2 * np.eye(2))
    traj = kf_run(m, np.zeros((6, 1)))
    p = m.p0
    for st_ in traj.states:
        np.testing.assert_allclose(st_.pred_cov, p, atol=1e-12)
        p = a @ p @ a.T + m.r


def test_covariances_do_not_depend_on_observations(rng):
    m = random_model(rng, 2)
    y = rng.standard_normal((8, 2))
    a = kf_run(m, y).pred_covs
    b = kf_run(m, y[rng.permutation(8)]).pred_covs
    np.testing.assert_array_equal(a, b)
    pred, upd, gains = kalman.covariance_path(m, 7)
    np.testing.assert_allclose(pred, a, atol=1e-13)


def test_joseph_form_matches(rng):
    m = random_model(rng, 3)
    y = rng.standard_normal((5, 3))
    a, b = kf_run(m, y).upd_covs, kf_run(m, y, joseph=True).upd_covs
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_filter_means_matches_kf_run(rng):
    m = random_model(rng, 2, 1)
    y = rng.standard_normal((6, 1))
    traj = kf_run(m, y)
    _, _, gains = kalman.covariance_path(m, 5)
    pred, upd = kalman.filter_means(m, y, gains)
    np.testing.assert_allclose(pred, np.stack([s.pred_mean for s in traj.states]), atol=1e-12)
    np.testing.assert_allclose(upd, np.stack([s.upd_mean for s in traj.states]), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 5))
def test_update_loewner_sandwich(seed, d):
    rng = np.random.default_rng(seed)
    m = random_model(rng, d)
    p = random_spd(rng, d, 0.1, 5.0)
    ap = kalman.updated_cov(m, p)
    assert loewner_leq(ap, p, tol=1e-9)
    assert loewner_leq(p - p @ m.s @ p, ap, tol=1e-9 * (1 + np.abs(p @ m.s @ p).max()))


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 5))
def test_square_root_and_gain_identities(seed, d):
    rng = np.random.default_rng(seed)
    m = random_model(rng, d)
    p = random_spd(rng, d, 0.1, 5.0)
    ph = principal_sqrt(p)
    root_form = ph @ np.linalg.inv(np.eye(d) + ph @ m.s @ ph) @ ph
    np.testing.assert_allclose(kalman.updated_cov(m, p), root_form, atol=1e-10 * (1 + np.abs(p).max()))
    ident = (np.eye(d) - gain(m, p) @ m.b) @ (np.eye(d) + p @ m.s)
    np.testing.assert_allclose(ident, np.eye(d), atol=1e-9 * (1 + np.abs(p @ m.s).max()))
