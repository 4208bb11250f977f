import numpy as np
import pytest

from enkf_lab import kalman
from enkf_lab.enkf import (EnsembleCollapseError, PerturbationState, check_members, clt_limit_draw,
                           enkf_predict, enkf_update, init_ensemble, init_perturbation,
                           interpolation_terms, lambda_limit_draw, make_backend,
                           martingale_correction, perturbation_predict, perturbation_step,
                           perturbation_update, run_filter, stabilize_cov, wishart_chain_init,
                           wishart_chain_step)
from enkf_lab.harness.stats import ks_battery, mean_se
from enkf_lab.linalg import principal_sqrt
from enkf_lab.model import validate
from enkf_lab.riccati import phi
from enkf_lab.wishart import (WishartParams, delta_sandwich, delta_variance,
                              sample_noncentral_wishart)


def within(est, se, target, k=4.0):
    return np.all(np.abs(est - target) <= k * se + 1e-12)


def test_member_count_gate(model2):
    with pytest.raises(ValueError, match=r"N\+1 > d required"):
        check_members(model2, 1)
    check_members(model2, 2)
    with pytest.raises(ValueError, match=r"N\+1 > d required"):
        make_backend("particle", model2, 1)
    with pytest.raises(ValueError):
        make_backend("nope", model2, 4)


def test_init_ensemble(model2, rng):
    a = init_ensemble(model2, 9, np.random.default_rng(1))
    b = init_ensemble(model2, 9, np.random.default_rng(1))
    assert np.array_equal(a.particles, b.particles)
    assert a.n_members == 9 and a.particles.shape == (2, 10)
    assert np.linalg.eigvalsh(a.cov)[0] > 0
    ens = init_ensemble(model2, 9, rng, size=(50_000,))
    w = sample_noncentral_wishart(WishartParams.from_noncentrality(9, model2.p0), rng,
                                  size=(50_000,))
    assert all(t["passed"] for t in ks_battery(ens.cov, w))


def test_update_without_observation_matrix(rng):
    m = validate(np.eye(2), np.zeros((1, 2)), np.eye(2), np.eye(1), np.eye(2))
    ens = init_ensemble(m, 5, rng)
    upd = enkf_update(m, ens, [1.0], rng)
    np.testing.assert_array_equal(upd.particles, ens.particles)
    np.testing.assert_array_equal(upd.cov, ens.cov)


def test_update_shrinks_on_average(golden, rng):
    ens = init_ensemble(golden, 10, rng, size=(20_000,))
    upd = enkf_update(golden, ens, [0.0], rng)
    m, se = mean_se(ens.cov - upd.cov)
    assert m[0, 0] > 4 * se[0, 0]


def test_matrix_form_equals_member_loop(model2, rng):
    ens = init_ensemble(model2, 6, rng, size=(3,))
    a = enkf_update(model2, ens, [0.5, -1.0], np.random.default_rng(4))
    b = enkf_update(model2, ens, [0.5, -1.0], np.random.default_rng(4), matrix_form=False)
    np.testing.assert_allclose(a.particles, b.particles, atol=1e-12)
    with pytest.raises(ValueError):
        enkf_update(model2, a, [0.0, 0.0], rng)


def test_predict_examples(rng):
    m = validate(np.zeros((2, 2)), np.eye(2), np.diag([1.0, 3.0]), np.eye(2), np.eye(2))
    ens = enkf_update(m, init_ensemble(m, 4, rng, size=(40_000,)), [0.0, 0.0], rng)
    nxt = enkf_predict(m, ens, rng)
    x = nxt.particles[:, :, 0]
    v, _ = mean_se(x ** 2)
    assert within(v, np.sqrt(2 / x.shape[0]) * np.diag(m.r), np.diag(m.r))
    again = enkf_predict(m, ens, np.random.default_rng(9)).particles
    assert np.array_equal(again, enkf_predict(m, ens, np.random.default_rng(9)).particles)
    with pytest.raises(ValueError):
        enkf_predict(m, nxt, rng)


def test_predict_conditional_law(model2, rng):
    ens = enkf_update(model2, init_ensemble(model2, 7, rng), [0.0, 0.0], rng)
    batch = type(ens)(np.broadcast_to(ens.particles, (60_000, 2, 8)).copy(), updated=True)
    nxt = enkf_predict(model2, batch, rng)
    q = model2.a @ ens.cov @ model2.a.T
    w = WishartParams.from_noncentrality(7, model2.r, q)
    m, se = mean_se(nxt.cov)
    assert within(m, se, q + model2.r)
    ref = sample_noncentral_wishart(w, rng, size=(60_000,))
    assert all(t["passed"] for t in ks_battery(nxt.cov, ref))


def test_noiseless_perturbation_limit_is_kalman(model2, rng):
    y = rng.standard_normal((6, 2))
    traj = kalman.kf_run(model2, y)
    run = run_filter(make_backend("perturbation", model2, 10 ** 14), 5, rng, observations=y)
    np.testing.assert_allclose(run.pred_cov, traj.pred_covs, atol=1e-5)
    np.testing.assert_allclose(run.upd_mean, np.stack([s.upd_mean for s in traj.states]),
                               atol=1e-5)


def test_perturbation_step_identity(model2, rng):
    st = init_perturbation(model2, 12, rng, size=(5,))
    nxt = perturbation_step(model2, st, [0.0, 0.0], 12, rng)
    np.testing.assert_allclose(nxt.cov, phi(model2, st.cov) + nxt.last_lambda / np.sqrt(12),
                               atol=1e-12)
    with pytest.raises(ValueError):
        perturbation_predict(model2, st, 12, rng)
    upd = perturbation_update(model2, st, [0.0, 0.0], 12, rng)
    with pytest.raises(ValueError):
        perturbation_update(model2, upd, [0.0, 0.0], 12, rng)


def test_lambda_moments_bounded_in_time(golden, rng):
    backend = make_backend("perturbation", golden, 32)
    st = backend.init(rng, size=(20_000,))
    norms = []
    for _ in range(40):
        st = backend.predict(backend.update(st, None, rng), rng)
        lam = np.abs(st.last_lambda[:, 0, 0])
        norms.append([np.mean(lam ** r) ** (1 / r) for r in (2, 4)])
    norms = np.array(norms)
    assert np.all(norms[10:].max(axis=0) / norms[10:].min(axis=0) < 1.1)


def test_one_step_laws_agree_across_backends(model2, rng):
    n, reps = 16, 60_000
    p = np.array([[1.5, 0.3], [0.3, 1.0]])
    ens0 = init_ensemble(model2, n, rng)
    xc = ens0.particles - ens0.mean[:, None]
    # rescale the initial ensemble so its sample covariance is exactly p
    xi = principal_sqrt(p) @ np.linalg.inv(principal_sqrt(ens0.cov)) @ xc
    ens = type(ens0)(np.broadcast_to(xi, (reps, 2, n + 1)).copy())
    np.testing.assert_allclose(ens.cov[0], p, atol=1e-12)
    part = make_backend("particle", model2, n)
    pert = make_backend("perturbation", model2, n)
    a = part.predict(part.update(ens, None, rng), rng).cov
    st = PerturbationState(cov=np.broadcast_to(p, (reps, 2, 2)).copy(),
                           mean=np.zeros((reps, 2)))
    b = pert.predict(pert.update(st, None, rng), rng).cov
    c = wishart_chain_step(model2, np.broadcast_to(p, (reps, 2, 2)), n, rng)
    for x, y in ((a, b), (a, c), (b, c)):
        assert all(t["passed"] for t in ks_battery(x, y))


def test_chain_mean_is_riccati_map(model2, rng):
    p = np.array([[2.0, -0.3], [-0.3, 0.7]])
    out = wishart_chain_step(model2, np.broadcast_to(p, (100_000, 2, 2)), 9, rng)
    m, se = mean_se(out)
    assert within(m, se, phi(model2, p))


def test_scalar_unobserved_chain_matches_particles(rng):
    m = validate([[0.8]], [[0.0]], [[1.0]], [[1.0]], [[1.0]])
    n = 6
    chain = run_filter(make_backend("wishart-chain", m, n), 40, rng, size=(20_000,))
    part = run_filter(make_backend("particle", m, n), 40, rng, size=(20_000,))
    a, b = chain.pred_cov[:, -1], part.pred_cov[:, -1]
    assert all(t["passed"] for t in ks_battery(a, b))


def test_chain_init_law(model2, rng):
    p0 = wishart_chain_init(model2, 8, rng, size=(50_000,))
    m, se = mean_se(p0)
    assert within(m, se, model2.p0)


def test_run_filter_shapes_and_p_init(model2, rng):
    run = run_filter(make_backend("particle", model2, 5), 3, rng, size=(4,))
    assert run.pred_cov.shape == (4, 4, 2, 2) and run.pred_mean.shape == (4, 4, 2)
    chain = run_filter(make_backend("wishart-chain", model2, 5), 0, rng, p_init=np.eye(2))
    assert chain.pred_cov.shape == (1, 2, 2) and chain.pred_mean is None
    np.testing.assert_array_equal(chain.pred_cov[0], np.eye(2))
    with pytest.raises(ValueError):
        run_filter(make_backend("particle", model2, 5), 3, rng, p_init=np.eye(2))


def test_stabilize_cov():
    p = np.diag([1.0, -1e-14])
    assert np.linalg.eigvalsh(stabilize_cov(p))[0] >= 0
    with pytest.raises(EnsembleCollapseError):
        stabilize_cov(np.diag([1.0, -0.1]))
    with pytest.raises(EnsembleCollapseError):
        stabilize_cov(np.array([[-1.0]]))


def test_interpolation_formula_pathwise(model2, rng):
    run = run_filter(make_backend("wishart-chain", model2, 20), 8, rng, size=(10,))
    covs = run.pred_cov
    terms = interpolation_terms(model2, covs)
    pred, _, _ = kalman.covariance_path(model2, 8)
    np.testing.assert_allclose(terms.sum(axis=-3), covs[:, -1] - pred[-1], atol=1e-8)


def test_martingale_correction_is_centered(golden, rng):
    run = run_filter(make_backend("wishart-chain", golden, 16), 10, rng, size=(100_000,))
    c = martingale_correction(golden, run.pred_cov)
    m, se = mean_se(c)
    assert within(m, se, 0.0)


def test_lambda_limit_examples(model2, rng):
    pred, upd, _ = kalman.covariance_path(model2, 4)
    lam0 = lambda_limit_draw(model2, pred, 0, rng, size=(100_000,))
    v, vse = mean_se(lam0 @ lam0)
    assert within(v, vse, delta_variance(WishartParams.from_noncentrality(10, model2.p0)))
    lam = lambda_limit_draw(model2, pred, 3, rng, size=(200_000,))
    m, se = mean_se(lam)
    assert within(m, se, 0.0)
    q = model2.a @ upd[2] @ model2.a.T
    w = WishartParams.from_noncentrality(10, model2.r, q)
    k = kalman.gain(model2, pred[2])
    ah = np.eye(2) - k @ model2.b
    wh = WishartParams.from_noncentrality(10, kalman.r_hat(model2, pred[2], k),
                                          ah @ pred[2] @ ah.T)
    expect = delta_variance(w) + model2.a @ delta_sandwich(wh, model2.a.T @ model2.a) @ model2.a.T
    m2, se2 = mean_se(lam @ lam)
    assert within(m2, se2, expect)


def test_clt_limit_matches_large_ensemble(golden, rng):
    n = 6
    pred, _, _ = kalman.covariance_path(golden, n)
    big = 20_000
    run = run_filter(make_backend("wishart-chain", golden, big), n, rng, size=(40_000,))
    x = np.sqrt(big) * (run.pred_cov[:, -1] - pred[-1])
    y = clt_limit_draw(golden, pred, n, rng, size=(40_000,))
    assert all(t["passed"] for t in ks_battery(x, y, kind="sym"))
