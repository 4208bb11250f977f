"""The Monte Carlo studies.

Each study splits its replicas into fixed-size blocks.  A block draws from
its own stream keyed by (seed, study, purpose, block index), so the merged
result does not depend on how blocks are spread over worker processes.
"""
import numpy as np
from scipy import stats

from enkf_lab import kalman
from enkf_lab.enkf import clt_limit_draw, make_backend, martingale_correction, run_filter
from enkf_lab.harness.core import (HypothesisError, StudyReport, block_plan, block_stream,
                                   merge_blocks, run_blocks)
from enkf_lab.harness.stats import (bonferroni_z, fit_line, fit_loglog_slope, ks_battery,
                                    ks_distance, mean_se, psd_within_ci, var_se)
from enkf_lab.linalg import matrix_norm, principal_sqrt, spd_inv
from enkf_lab.model import simulate_paths
from enkf_lab.riccati import riccati_bounds


def _fro(x):
    return np.sqrt((x ** 2).sum(axis=(-2, -1)))


def _tasks(cfg, worker, sizes=None, replicas=None):
    sizes = cfg.ensemble_sizes if sizes is None else sizes
    replicas = cfg.replicas if replicas is None else replicas
    plan = block_plan(replicas, cfg.block_size)
    return [(worker, cfg, n, b, reps) for n in sizes for b, reps in enumerate(plan)]


def _call(worker, cfg, n, block, reps):
    return worker(cfg, n, block, reps)


def _collect(cfg, worker, jobs, sizes=None, replicas=None):
    """Run ``worker`` over all (N, block) tasks; returns ``{N: merged arrays}``."""
    sizes = cfg.ensemble_sizes if sizes is None else sizes
    tasks = _tasks(cfg, worker, sizes, replicas)
    results = run_blocks(_call, tasks, jobs)
    out = {}
    for n in sizes:
        out[n] = merge_blocks([r for t, r in zip(tasks, results) if t[2] == n])
    return out


def _slope_verdict(report, name, sizes, values, target, tol):
    fit = fit_loglog_slope(sizes, values)
    report.slopes[name] = fit.to_dict()
    report.verdict(f"{name}_slope", abs(fit.slope - target) <= tol, slope=fit.slope,
                   ci=list(fit.ci), target=target, tolerance=tol)
    return fit


def _moment_curves(err, moments):
    """``(mean err^r)^{1/r}`` along the step axis for each ``r``."""
    return {r: np.mean(err ** r, axis=0) ** (1.0 / r) for r in moments}


def _flatness(curve, start):
    """``sup_{n >= start} curve[n] / curve[start]``."""
    if start >= curve.size:
        raise ValueError(f"horizon must exceed the flatness start {start}")
    return float(curve[start:].max() / curve[start])


def _rate_report(report, cfg, series, label):
    """Slopes, flatness and moment ordering for per-N error series.

    ``series[N]`` has shape (replicas, horizon+1).
    """
    opts = cfg.options
    sizes = list(cfg.ensemble_sizes)
    moments = [int(r) for r in opts["moments"]]
    lo, hi = opts["flat_band"]
    start = int(opts["flat_from"])
    sups = {r: [] for r in moments}
    flat = []
    per_n = {}
    ordered = True
    for n in sizes:
        curves = _moment_curves(series[n], moments)
        for r in moments:
            sups[r].append(float(curves[r].max()))
        ratio = _flatness(curves[moments[0]], start)
        flat.append(ratio)
        ordered &= all(np.all(curves[a] <= curves[b] * (1 + 1e-12))
                       for a, b in zip(moments, moments[1:]))
        per_n[n] = {f"sup_moment_r{r}": float(curves[r].max()) for r in moments}
        per_n[n]["mean_curve"] = curves[moments[0]]
        per_n[n]["flatness_ratio"] = ratio
    report.statistics[label] = per_n
    for r in moments:
        _slope_verdict(report, f"{label}_r{r}", sizes, sups[r], opts["slope_target"],
                       opts["slope_tol"])
    report.verdict(f"{label}_time_flatness", all(lo <= f <= hi for f in flat),
                   ratios=flat, band=[lo, hi], start=start)
    report.verdict(f"{label}_moment_ordering", ordered, moments=moments)
    return sups


# -- bias -------------------------------------------------------------------------

def _bias_worker(cfg, n_members, block, reps):
    params = cfg.model
    rng = block_stream(cfg, f"N{n_members}", block)
    backend = make_backend(cfg.backend, params, n_members)
    run = run_filter(backend, cfg.horizon, rng, size=(reps,))
    k = int(cfg.options["eval_step"])
    covs = run.pred_cov
    corrected = covs[:, k] - martingale_correction(params, covs[:, : k + 1])
    return {"p": covs, "p_corrected": corrected}


def bias_study(cfg, jobs=1):
    """``P_n - E(p_n)``: positivity for every ``n`` and ``1/N`` decay at a fixed step.

    The decay is measured on ``p_n - C_n`` where ``C_n`` is a mean-zero
    martingale sum; this keeps the mean but removes the ``1/sqrt(N)``
    fluctuation that would otherwise swamp an ``O(1/N)`` bias.
    """
    params = cfg.model
    opts = cfg.options
    k = int(opts["eval_step"])
    if not 0 <= k <= cfg.horizon:
        raise ValueError("eval_step must lie in [0, horizon]")
    sizes = list(cfg.ensemble_sizes)
    data = _collect(cfg, _bias_worker, jobs)
    pred, _, _ = kalman.covariance_path(params, cfg.horizon)
    lower, upper = riccati_bounds(params)
    report = StudyReport("bias", cfg)
    checks = len(sizes) * (cfg.horizon + 1) * 2
    z = bonferroni_z(opts["alpha"], checks)
    psd_ok, lower_ok = True, True
    worst = np.inf
    norms, norm_se, scaled = [], [], {}
    for n in sizes:
        p = data[n]["p"]
        mean, se = mean_se(p)
        bias = pred - mean
        ok, margin = psd_within_ci(bias, se, z)
        psd_ok &= ok
        worst = min(worst, float(margin.min()))
        ok_low, _ = psd_within_ci(mean[1:] - lower, se[1:], z)
        lower_ok &= ok_low
        cmean, cse = mean_se(data[n]["p_corrected"])
        cbias = pred[k] - cmean
        ok_c, _ = psd_within_ci(cbias, cse, z)
        psd_ok &= ok_c
        norms.append(float(matrix_norm(cbias)))
        norm_se.append(float(matrix_norm(cse)))
        scaled[n] = {"n_times_bias": n * cbias, "n_times_bias_se": n * cse,
                     "raw_bias_at_eval": bias[k], "raw_bias_se_at_eval": se[k],
                     "min_psd_margin": float(margin.min())}
        report.raw.extend({"N": n, "replica": i, "trace_p_eval": float(np.trace(p[i, k])),
                           "trace_p_corrected": float(np.trace(data[n]["p_corrected"][i]))}
                          for i in range(p.shape[0]))
    report.statistics["per_N"] = scaled
    report.statistics["bias_norm_at_eval"] = dict(zip(sizes, norms))
    report.statistics["bias_norm_se_at_eval"] = dict(zip(sizes, norm_se))
    report.statistics["eval_step"] = k
    report.verdict("under_bias_psd_within_ci", psd_ok, z=z, min_margin=worst)
    report.verdict("mean_above_R_within_ci", lower_ok, z=z)
    if upper is not None:
        report.verdict("riccati_below_upper_bound",
                       bool(np.all(np.linalg.eigvalsh(upper - pred[1:])[:, 0] >= -1e-10)))
    scale = 1e-12 * (1.0 + float(matrix_norm(pred[k])))
    if min(norms) <= scale:
        # e.g. B = 0: the chain mean follows the exact recursion, no rate to fit
        report.verdict("bias_negligible",
                       all(b <= z * s + scale for b, s in zip(norms, norm_se)), z=z)
    else:
        _slope_verdict(report, "bias", sizes, norms, opts["slope_target"], opts["slope_tol"])
    return report


# -- fluctuation / gain error --------------------------------------------------------

def _fluct_worker(cfg, n_members, block, reps):
    params = cfg.model
    rng = block_stream(cfg, f"N{n_members}", block)
    run = run_filter(make_backend(cfg.backend, params, n_members), cfg.horizon, rng, size=(reps,))
    pred, upd, gains = kalman.covariance_path(params, cfg.horizon)
    out = {"cov_err": _fro(run.pred_cov - pred)}
    if cfg.study == "gain-error":
        out["upd_err"] = _fro(run.upd_cov - upd)
        out["gain_err"] = _fro(kalman.gain(params, run.pred_cov) - gains)
    return out


def fluctuation_study(cfg, jobs=1):
    """``sup_n (E |p_n - P_n|^r)^{1/r}`` against ``N``; slope ``-1/2`` and flat in ``n``."""
    data = _collect(cfg, _fluct_worker, jobs)
    report = StudyReport("fluctuation", cfg)
    _rate_report(report, cfg, {n: d["cov_err"] for n, d in data.items()}, "cov_error")
    for n, d in data.items():
        report.raw.extend({"N": n, "replica": i, "sup_cov_err": float(row.max())}
                          for i, row in enumerate(d["cov_err"]))
    return report


def gain_lipschitz_constant(params):
    """``lambda_1(S) Tr(S) |S^{-1}|_F / sqrt(lambda_min(B B'))``, or None if undefined."""
    lam_s = np.linalg.eigvalsh(params.s)
    lam_b = np.linalg.eigvalsh(params.b @ params.b.T)
    if lam_s[0] <= 1e-12 * max(1.0, lam_s[-1]) or lam_b[0] <= 1e-12 * max(1.0, lam_b[-1]):
        return None
    return float(lam_s[-1] * lam_s.sum() * matrix_norm(spd_inv(params.s)) / np.sqrt(lam_b[0]))


def gain_error_study(cfg, jobs=1):
    """Rates for ``|p_hat_n - P_hat_n|`` and ``|K(p_n) - K(P_n)|`` plus the per-draw Lipschitz bound."""
    data = _collect(cfg, _fluct_worker, jobs)
    report = StudyReport("gain-error", cfg)
    if np.all(cfg.model.b == 0):
        zero = all(np.all(d["gain_err"] == 0) for d in data.values())
        report.verdict("gain_error_identically_zero", zero)
        report.statistics["note"] = "B = 0: the gain is identically zero"
        return report
    _rate_report(report, cfg, {n: d["upd_err"] for n, d in data.items()}, "updated_cov_error")
    _rate_report(report, cfg, {n: d["gain_err"] for n, d in data.items()}, "gain_error")
    const = gain_lipschitz_constant(cfg.model)
    if const is not None:
        worst = max(float(np.max(d["gain_err"] - const * d["cov_err"])) for d in data.values())
        report.verdict("gain_lipschitz_per_draw", worst <= 1e-12, constant=const,
                       max_excess=worst)
    else:
        report.statistics["gain_lipschitz"] = "not applicable: S or B B' singular"
    for n, d in data.items():
        report.raw.extend({"N": n, "replica": i, "sup_upd_err": float(d["upd_err"][i].max()),
                           "sup_gain_err": float(d["gain_err"][i].max())}
                          for i in range(d["gain_err"].shape[0]))
    return report


# -- state error ---------------------------------------------------------------------

def contraction_norm(params):
    """``|S^{1/2} A S^{-1/2}|_2``; infinite when ``S`` is singular."""
    lam = np.linalg.eigvalsh(params.s)
    if lam[0] <= 1e-12 * max(1.0, lam[-1]):
        return np.inf
    s_half = principal_sqrt(params.s)
    return float(matrix_norm(s_half @ params.a @ np.linalg.inv(s_half), "spectral"))


def check_contraction(params):
    value = contraction_norm(params)
    if not value < 1.0:
        raise HypothesisError(
            f"state-error study needs |S^(1/2) A S^(-1/2)|_2 < 1, got {value:.6g}; "
            "the model is not contractive")
    return value


def _state_worker(cfg, n_members, block, reps):
    params = cfg.model
    _, obs = simulate_paths(params, cfg.horizon, block_stream(cfg, "observations", block),
                            size=(reps,))
    _, _, gains = kalman.covariance_path(params, cfg.horizon)
    kf_pred, kf_upd = kalman.filter_means(params, obs, gains)
    rng = block_stream(cfg, f"N{n_members}", block)
    backend = make_backend(cfg.backend, params, n_members)
    if backend.name == "wishart-chain":
        raise ValueError("state-error study needs a backend that tracks the mean")
    run = run_filter(backend, cfg.horizon, rng, observations=obs, size=(reps,))
    return {"pred_err": np.linalg.norm(run.pred_mean - kf_pred, axis=-1),
            "upd_err": np.linalg.norm(run.upd_mean - kf_upd, axis=-1)}


def state_error_study(cfg, jobs=1):
    """Sample means against the Kalman means on observation paths drawn from the model."""
    rho = check_contraction(cfg.model)
    data = _collect(cfg, _state_worker, jobs)
    report = StudyReport("state-error", cfg)
    report.statistics["contraction_norm"] = rho
    _rate_report(report, cfg, {n: d["pred_err"] for n, d in data.items()}, "predicted_mean_error")
    _rate_report(report, cfg, {n: d["upd_err"] for n, d in data.items()}, "updated_mean_error")
    for n, d in data.items():
        report.raw.extend({"N": n, "replica": i, "sup_pred_err": float(d["pred_err"][i].max()),
                           "sup_upd_err": float(d["upd_err"][i].max())}
                          for i in range(d["pred_err"].shape[0]))
    return report


# -- lyapunov --------------------------------------------------------------------------

def lyapunov_value(p):
    """``1 + Tr(p) + Tr(p^{-1})``."""
    return 1.0 + np.trace(p, axis1=-2, axis2=-1) + np.trace(spd_inv(p), axis1=-2, axis2=-1)


def _dispersed_covs(rng, d, reps, lo, hi):
    """Random SPD matrices with log-uniform eigenvalues in ``[lo, hi]``."""
    lam = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(reps, d)))
    q, _ = np.linalg.qr(rng.standard_normal((reps, d, d)))
    return (q * lam[:, None, :]) @ np.swapaxes(q, -1, -2)


def _lyapunov_worker(cfg, n_members, block, reps):
    params = cfg.model
    rng = block_stream(cfg, f"N{n_members}", block)
    lo, hi = cfg.options["init_range"]
    p0 = _dispersed_covs(rng, params.d, reps, lo, hi)
    run = run_filter(make_backend("wishart-chain", params, n_members), cfg.horizon, rng,
                     size=(reps,), p_init=p0)
    covs = run.pred_cov
    return {"u": lyapunov_value(covs), "trace": np.trace(covs, axis1=-2, axis2=-1),
            "inv": spd_inv(covs[:, 1:])}


def _clustered_fit(x, y):
    """OLS ``y = c + eps x`` with standard errors clustered on the first axis."""
    reps = x.shape[0]
    xs = np.column_stack([np.ones(x.size), x.ravel()])
    ys = y.ravel()
    xtx_inv = np.linalg.inv(xs.T @ xs)
    beta = xtx_inv @ xs.T @ ys
    resid = (ys - xs @ beta).reshape(x.shape)
    scores = np.stack([resid.sum(axis=1), (resid * x).sum(axis=1)], axis=1)
    meat = scores.T @ scores * reps / (reps - 1)
    cov = xtx_inv @ meat @ xtx_inv
    return beta, np.sqrt(np.diag(cov))


def lyapunov_study(cfg, jobs=1):
    """Drift regression ``E[U(p_{n+1}) | p_n] ~ c + eps U(p_n)`` with ``eps < 1``.

    Chains start from dispersed covariances so the regression sees a wide
    range of ``U``.  Standard errors are clustered by replica.
    """
    params = cfg.model
    d = params.d
    data = _collect(cfg, _lyapunov_worker, jobs)
    report = StudyReport("lyapunov", cfg)
    _, upper = riccati_bounds(params)
    z = bonferroni_z(cfg.options["alpha"], max(cfg.horizon, 1))
    for n, dat in data.items():
        u = dat["u"]
        beta, se = _clustered_fit(u[:, :-1], u[:, 1:])
        eps_hi = beta[1] + stats.norm.ppf(0.975) * se[1]
        report.verdict(f"drift_contraction_N{n}", eps_hi < 1.0, epsilon=beta[1],
                       epsilon_ci_upper=eps_hi, constant=beta[0])
        tr_mean, tr_se = mean_se(dat["trace"][:, 1:])
        stats_n = {"epsilon": beta[1], "epsilon_se": se[1], "c": beta[0], "c_se": se[0],
                   "mean_trace": tr_mean}
        if upper is not None:
            env = float(np.trace(upper))
            report.verdict(f"trace_envelope_N{n}", bool(np.all(tr_mean <= env + z * tr_se)),
                           envelope=env, max_mean_trace=float(tr_mean.max()))
        if n > 2 * d + 1:
            inv_mean, inv_se = mean_se(dat["inv"])
            bound = spd_inv(params.r) / (1.0 - (2 * d + 1) / n)
            ok, margin = psd_within_ci(bound - inv_mean, inv_se, z)
            report.verdict(f"inverse_moment_envelope_N{n}", ok, min_margin=float(margin.min()))
            stats_n["inverse_mean_max_eig"] = np.linalg.eigvalsh(inv_mean)[:, -1]
        report.statistics[f"N{n}"] = stats_n
        report.raw.extend({"N": n, "replica": i, "u_0": float(u[i, 0]), "u_final": float(u[i, -1])}
                          for i in range(u.shape[0]))
    return report


# -- ergodicity ------------------------------------------------------------------------

def _ergodic_worker(cfg, n_members, block, reps):
    params = cfg.model
    d = params.d
    lo, hi = (float(v) for v in cfg.options["inits"])
    backend = make_backend("wishart-chain", params, n_members)
    eye = np.eye(d)
    # synchronous coupling: both chains replay the same stream
    coupled = [run_filter(backend, cfg.horizon, block_stream(cfg, "coupled", block),
                          size=(reps,), p_init=v * eye).pred_cov for v in (lo, hi)]
    ind_lo = run_filter(backend, cfg.horizon, block_stream(cfg, "independent-lo", block),
                        size=(reps,), p_init=lo * eye).pred_cov
    ind_hi = run_filter(backend, cfg.horizon + 1, block_stream(cfg, "independent-hi", block),
                        size=(reps,), p_init=hi * eye).pred_cov
    return {"tr_lo": np.trace(coupled[0], axis1=-2, axis2=-1),
            "tr_hi": np.trace(coupled[1], axis1=-2, axis2=-1),
            "final_lo": ind_lo[:, -1], "final_hi": ind_hi[:, -2], "pushed_hi": ind_hi[:, -1]}


def ergodicity_study(cfg, jobs=1):
    """Forgetting of the initial law by the covariance chain.

    Two chains from dispersed starts share their noise (synchronous
    coupling); each is still an exact sample of its own law, so the KS
    distance between the two empirical laws of ``Tr(p_n)`` tracks the
    distance between the marginal laws with far less noise than
    independent runs.  Independent runs then confirm the final laws agree
    and that one more transition leaves the law unchanged.
    """
    opts = cfg.options
    data = _collect(cfg, _ergodic_worker, jobs)
    report = StudyReport("ergodicity", cfg)
    for n, dat in data.items():
        reps = dat["tr_lo"].shape[0]
        steps = np.arange(cfg.horizon + 1)
        dist = np.array([ks_distance(dat["tr_lo"][:, k], dat["tr_hi"][:, k]) for k in steps])
        gap = np.abs(dat["tr_lo"] - dat["tr_hi"]).mean(axis=0)
        check_at = min(100, cfg.horizon)
        report.verdict(f"ks_below_target_N{n}", dist[check_at] < opts["ks_target"],
                       step=check_at, ks=dist[check_at], target=opts["ks_target"])
        floor = 2.0 / reps
        keep = dist > floor
        stats_n = {"ks_distance": dist, "coupling_gap": gap, "floor": floor}
        if keep.sum() >= 5:
            fit = fit_line(steps[keep], np.log(dist[keep]))
            report.slopes[f"log_ks_N{n}"] = fit.to_dict()
            report.verdict(f"ks_decay_rate_N{n}", fit.ci[1] < 0, slope=fit.slope,
                           ci=list(fit.ci), rate_estimate=float(np.exp(fit.slope)),
                           points=int(keep.sum()))
        else:
            report.verdict(f"ks_decay_rate_N{n}", False, points=int(keep.sum()),
                           reason="fewer than 5 distances above the resolution floor")
        good = gap > 1e-12 * (1.0 + gap[0])
        if good.sum() >= 5:
            gfit = fit_line(steps[good], np.log(gap[good]))
            report.slopes[f"log_coupling_gap_N{n}"] = gfit.to_dict()
            stats_n["contraction_rate_estimate"] = float(np.exp(gfit.slope))
        report.statistics[f"N{n}"] = stats_n
        final = ks_battery(dat["final_lo"], dat["final_hi"], alpha=opts["alpha"],
                           label="independent finals")
        report.verdict(f"final_laws_agree_N{n}", all(t["passed"] for t in final), tests=final)
        pushed = ks_battery(dat["final_lo"], dat["pushed_hi"], alpha=opts["alpha"],
                            label="final vs one more step")
        report.verdict(f"stationary_under_transition_N{n}", all(t["passed"] for t in pushed),
                       tests=pushed)
        report.raw.extend({"N": n, "replica": i, "trace_final_lo": float(dat["tr_lo"][i, -1]),
                           "trace_final_hi": float(dat["tr_hi"][i, -1])} for i in range(reps))
    return report


# -- clt -----------------------------------------------------------------------------

def _clt_worker(cfg, n_members, block, reps):
    params = cfg.model
    rng = block_stream(cfg, f"N{n_members}", block)
    run = run_filter(make_backend(cfg.backend, params, n_members), cfg.horizon, rng, size=(reps,))
    pred, _, _ = kalman.covariance_path(params, cfg.horizon)
    return {"x": np.sqrt(n_members) * (run.pred_cov[:, -1] - pred[-1])}


def _limit_worker(cfg, _, block, reps):
    pred, _, _ = kalman.covariance_path(cfg.model, cfg.horizon)
    return {"x": clt_limit_draw(cfg.model, pred, cfg.horizon, block_stream(cfg, "limit", block),
                                size=(reps,))}


def clt_study(cfg, jobs=1):
    """``sqrt(N)(p_n - P_n)`` against draws of its Gaussian-matrix limit."""
    opts = cfg.options
    d = cfg.model.d
    data = _collect(cfg, _clt_worker, jobs)
    limit = _collect(cfg, _limit_worker, jobs, sizes=[0],
                     replicas=int(opts["limit_draws"]))[0]["x"]
    iu = np.triu_indices(d)
    band = float(opts["sigma_band"])
    report = StudyReport("clt", cfg)
    lm, lse = mean_se(limit)
    lv, lvse = var_se(limit)
    for n, dat in data.items():
        x = dat["x"]
        m, se = mean_se(x)
        v, vse = var_se(x)
        zm = np.abs(m - lm)[iu] / np.hypot(se, lse)[iu]
        zv = np.abs(v - lv)[iu] / np.hypot(vse, lvse)[iu]
        report.verdict(f"means_within_band_N{n}", bool(np.all(zm <= band)), max_sigma=zm.max(),
                       band=band)
        report.verdict(f"variances_within_band_N{n}", bool(np.all(zv <= band)),
                       max_sigma=zv.max(), band=band)
        tests = ks_battery(x, limit, kind="sym", alpha=opts["alpha"], label="enkf vs limit")
        report.verdict(f"ks_vs_limit_N{n}", all(t["passed"] for t in tests), tests=tests)
        report.statistics[f"N{n}"] = {"mean": m, "mean_se": se, "variance": v,
                                      "limit_mean": lm, "limit_variance": lv,
                                      "bias_times_sqrt_n": -m}
        report.raw.extend({"N": n, "replica": i, "trace_scaled_error": float(np.trace(x[i]))}
                          for i in range(x.shape[0]))
    return report


_STUDIES = {
    "bias": bias_study,
    "fluctuation": fluctuation_study,
    "gain-error": gain_error_study,
    "lyapunov": lyapunov_study,
    "ergodicity": ergodicity_study,
    "clt": clt_study,
    "state-error": state_error_study,
}


def run_study(cfg, jobs=1):
    """Dispatch on ``cfg.study``; returns a :class:`StudyReport`."""
    return _STUDIES[cfg.study](cfg, jobs)
