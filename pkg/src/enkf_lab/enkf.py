"""Ensemble Kalman filter and its equivalent-in-law representations.

Three backends share one update/predict interface:

``particle``
    the ``N + 1`` member ensemble itself;
``perturbation``
    sample mean and covariance driven by fresh Gaussian and Wishart
    fluctuations, with the fluctuation matrices kept for analysis;
``wishart-chain``
    the covariance alone as a Markov chain of non-central Wishart draws.

All arrays carry optional leading replica dimensions.  Sample covariances
are normalized by ``1/N`` over ``N + 1`` members.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from enkf_lab import kalman
from enkf_lab.linalg import principal_sqrt, sym_part
from enkf_lab.riccati import e_n_product, phi
from enkf_lab.wishart import assemble_delta, goe, noncentral_wishart, sample_h_g, sample_mean_cov

BACKENDS = ("particle", "perturbation", "wishart-chain")


class EnsembleCollapseError(ArithmeticError):
    """An evolving covariance lost positive semidefiniteness beyond round-off."""


def _t(a):
    return np.swapaxes(a, -1, -2)


def check_members(params, n_members):
    if n_members < 1:
        raise ValueError("ensemble size N must be >= 1")
    if n_members + 1 <= params.d:
        raise ValueError(f"N+1 > d required (N={n_members}, d={params.d})")


def stabilize_cov(p):
    """Symmetrize; clamp eigenvalues in ``[-1e-10 trace, 0)`` and fail below that."""
    p = sym_part(p)
    if p.shape[-1] == 1:
        val = p[..., 0, 0]
        if np.any(val < -1e-10 * np.abs(val)):
            raise EnsembleCollapseError("covariance became negative; N too small?")
        return np.clip(p, 0.0, None)
    lam, vec = np.linalg.eigh(p)
    floor = -1e-10 * np.abs(np.trace(p, axis1=-2, axis2=-1))
    if np.any(lam[..., 0] < floor):
        raise EnsembleCollapseError("covariance lost definiteness; N too small?")
    bad = lam[..., 0] < 0
    if np.any(bad):
        lam = np.clip(lam, 0.0, None)
        fixed = sym_part((vec * lam[..., None, :]) @ _t(vec))
        p = np.where(bad[..., None, None], fixed, p)
    return p


def _obs(params, y, batch):
    if y is None:
        return np.zeros(batch + (params.d0,))
    return np.broadcast_to(np.asarray(y, dtype=float), batch + (params.d0,))


@dataclass
class Ensemble:
    """``d x (N+1)`` particle block with cached sample statistics."""

    particles: np.ndarray
    step: int = 0
    updated: bool = False

    @property
    def n_members(self):
        return self.particles.shape[-1] - 1

    @property
    def batch(self):
        return self.particles.shape[:-2]

    @cached_property
    def _stats(self):
        return sample_mean_cov(self.particles)

    @property
    def mean(self):
        return self._stats[0]

    @property
    def cov(self):
        return self._stats[1]


@dataclass
class PerturbationState:
    """Sample mean/covariance pair of the fluctuation representation.

    ``mean`` is None for the covariance-only chain.  ``last_lambda`` is the
    one-step fluctuation ``A Delta_hat A' + Delta`` of the latest prediction.
    """

    cov: np.ndarray
    mean: Optional[np.ndarray] = None
    step: int = 0
    updated: bool = False
    last_delta_hat: Optional[np.ndarray] = field(default=None, repr=False)
    last_delta: Optional[np.ndarray] = field(default=None, repr=False)
    last_lambda: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def batch(self):
        return self.cov.shape[:-2]


# -- particle system ---------------------------------------------------------

def init_ensemble(params, n_members, rng, size=()):
    """``N + 1`` i.i.d. ``N(x0_mean, P0)`` members."""
    check_members(params, n_members)
    z = rng.standard_normal(tuple(size) + (params.d, n_members + 1))
    xi = params.x0_mean[:, None] + principal_sqrt(params.p0) @ z
    return Ensemble(particles=xi)


def enkf_update(params, ens, y, rng, matrix_form=True):
    """Perturbed-observation update with the gain of the sample covariance.

    ``matrix_form=False`` runs the member-by-member loop; both paths consume
    the same observation noise block.
    """
    if ens.updated:
        raise ValueError("ensemble is already updated")
    xi = ens.particles
    n1 = xi.shape[-1]
    y = _obs(params, y, ens.batch)
    v = principal_sqrt(params.r0) @ rng.standard_normal(ens.batch + (params.d0, n1))
    k = kalman.gain(params, ens.cov)
    if matrix_form:
        innov = y[..., :, None] - params.b @ xi - v
        xi_hat = xi + k @ innov
    else:
        xi_hat = np.empty_like(xi)
        for i in range(n1):
            innov = y - xi[..., :, i] @ params.b.T - v[..., :, i]
            xi_hat[..., :, i] = xi[..., :, i] + np.einsum("...ij,...j->...i", k, innov)
    return Ensemble(particles=xi_hat, step=ens.step, updated=True)


def enkf_predict(params, ens, rng):
    """``xi_{n+1} = A xi_hat + W`` with fresh ``N(0, R)`` columns."""
    if not ens.updated:
        raise ValueError("enkf_predict needs an updated ensemble")
    w = principal_sqrt(params.r) @ rng.standard_normal(ens.particles.shape)
    return Ensemble(particles=params.a @ ens.particles + w, step=ens.step + 1)


# -- fluctuation representation ---------------------------------------------

def _fluctuation(rng, n_members, scale, nc, size):
    h, g = sample_h_g(rng, scale.shape[-1], n_members, size)
    return assemble_delta(principal_sqrt(scale), h, g, principal_sqrt(nc))


def init_perturbation(params, n_members, rng, size=(), with_mean=True):
    """``m_0 = x0_mean + P0^{1/2} Z0 / sqrt(N+1)``, ``p_0 = P0 + Delta_0 / sqrt(N)``."""
    check_members(params, n_members)
    size = tuple(size)
    d = params.d
    delta = _fluctuation(rng, n_members, params.p0, np.zeros((d, d)), size)
    cov = stabilize_cov(params.p0 + delta / np.sqrt(n_members))
    mean = None
    if with_mean:
        z0 = rng.standard_normal(size + (d,))
        mean = params.x0_mean + z0 @ principal_sqrt(params.p0).T / np.sqrt(n_members + 1)
    return PerturbationState(cov=cov, mean=mean, last_delta=delta, last_lambda=delta)


def perturbation_update(params, state, y, n_members, rng):
    """``m_hat = m + K(y - B m) + K R0^{1/2} z0 / sqrt(N+1)``, ``p_hat = A_hat(p) p + Delta_hat / sqrt(N)``.

    ``Delta_hat`` has scale ``R_hat(p)`` and non-centrality ``A_hat p A_hat'``.
    """
    if state.updated:
        raise ValueError("state is already updated")
    p = state.cov
    batch = state.batch
    k = kalman.gain(params, p)
    a_h = np.eye(params.d) - k @ params.b
    delta_hat = _fluctuation(rng, n_members, kalman.r_hat(params, p, k),
                             sym_part(a_h @ p @ _t(a_h)), batch)
    cov = stabilize_cov(kalman.updated_cov(params, p, k=k) + delta_hat / np.sqrt(n_members))
    mean = None
    if state.mean is not None:
        y = _obs(params, y, batch)
        z0 = rng.standard_normal(batch + (params.d0,))
        innov = y - state.mean @ params.b.T + z0 @ principal_sqrt(params.r0).T / np.sqrt(n_members + 1)
        mean = state.mean + np.einsum("...ij,...j->...i", k, innov)
    return PerturbationState(cov=cov, mean=mean, step=state.step, updated=True,
                             last_delta_hat=delta_hat, last_delta=state.last_delta,
                             last_lambda=state.last_lambda)


def perturbation_predict(params, state, n_members, rng):
    """``m+ = A m_hat + R^{1/2} Z0 / sqrt(N+1)``, ``p+ = A p_hat A' + R + Delta / sqrt(N)``.

    ``Delta`` has scale ``R`` and non-centrality ``A p_hat A'``.
    """
    if not state.updated:
        raise ValueError("perturbation_predict needs an updated state")
    batch = state.batch
    a = params.a
    nc = sym_part(a @ state.cov @ a.T)
    delta = _fluctuation(rng, n_members, params.r, nc, batch)
    cov = stabilize_cov(nc + params.r + delta / np.sqrt(n_members))
    mean = None
    if state.mean is not None:
        z0 = rng.standard_normal(batch + (params.d,))
        mean = state.mean @ a.T + z0 @ principal_sqrt(params.r).T / np.sqrt(n_members + 1)
    lam = sym_part(a @ state.last_delta_hat @ a.T) + delta
    return PerturbationState(cov=cov, mean=mean, step=state.step + 1,
                             last_delta_hat=state.last_delta_hat, last_delta=delta,
                             last_lambda=lam)


def perturbation_step(params, state, y, n_members, rng):
    """One update-prediction transition; ``p+ == phi(p) + Lambda / sqrt(N)``."""
    upd = perturbation_update(params, state, y, n_members, rng)
    return perturbation_predict(params, upd, n_members, rng)


def wishart_chain_update(params, p, n_members, rng, method="bartlett"):
    """``p_hat ~ Wishart(N, N A_hat p A_hat', R_hat(p)) / N``."""
    k = kalman.gain(params, p)
    a_h = np.eye(params.d) - k @ params.b
    nc = sym_part(a_h @ p @ _t(a_h))
    return noncentral_wishart(rng, n_members, principal_sqrt(nc),
                              principal_sqrt(kalman.r_hat(params, p, k)), method=method)


def wishart_chain_predict(params, p_hat, n_members, rng, method="bartlett"):
    """``p+ ~ Wishart(N, N A p_hat A', R) / N``."""
    nc = sym_part(params.a @ p_hat @ params.a.T)
    scale_sqrt = np.broadcast_to(principal_sqrt(params.r), nc.shape)
    return noncentral_wishart(rng, n_members, principal_sqrt(nc), scale_sqrt, method=method)


def wishart_chain_step(params, p, n_members, rng, method="bartlett"):
    """One transition of the sample-covariance Markov chain."""
    p_hat = wishart_chain_update(params, p, n_members, rng, method)
    return wishart_chain_predict(params, p_hat, n_members, rng, method)


def wishart_chain_init(params, n_members, rng, size=()):
    """``p_0 ~ Wishart(N, 0, P0) / N``."""
    d = params.d
    return noncentral_wishart(rng, n_members, np.zeros((d, d)), principal_sqrt(params.p0),
                              size=size)


# -- common stepping interface ------------------------------------------------

class Backend:
    """Update/predict stepping shared by all representations."""

    name = None

    def __init__(self, params, n_members):
        check_members(params, n_members)
        self.params = params
        self.n_members = int(n_members)

    def init(self, rng, size=()):
        raise NotImplementedError

    def update(self, state, y, rng):
        raise NotImplementedError

    def predict(self, state, rng):
        raise NotImplementedError


class ParticleBackend(Backend):
    name = "particle"

    def init(self, rng, size=()):
        return init_ensemble(self.params, self.n_members, rng, size)

    def update(self, state, y, rng):
        return enkf_update(self.params, state, y, rng)

    def predict(self, state, rng):
        return enkf_predict(self.params, state, rng)


class PerturbationBackend(Backend):
    name = "perturbation"

    def init(self, rng, size=()):
        return init_perturbation(self.params, self.n_members, rng, size)

    def update(self, state, y, rng):
        return perturbation_update(self.params, state, y, self.n_members, rng)

    def predict(self, state, rng):
        return perturbation_predict(self.params, state, self.n_members, rng)


class WishartChainBackend(Backend):
    name = "wishart-chain"

    def init(self, rng, size=()):
        return PerturbationState(cov=wishart_chain_init(self.params, self.n_members, rng, size))

    def update(self, state, y, rng):
        cov = wishart_chain_update(self.params, state.cov, self.n_members, rng)
        return PerturbationState(cov=cov, step=state.step, updated=True)

    def predict(self, state, rng):
        cov = wishart_chain_predict(self.params, state.cov, self.n_members, rng)
        return PerturbationState(cov=cov, step=state.step + 1)


def make_backend(name, params, n_members):
    classes = {"particle": ParticleBackend, "perturbation": PerturbationBackend,
               "wishart-chain": WishartChainBackend}
    if name not in classes:
        raise ValueError(f"unknown backend {name!r}; choose from {', '.join(BACKENDS)}")
    return classes[name](params, n_members)


@dataclass
class EnkfRun:
    """Recorded statistics for steps ``0..n``; means are None for the chain."""

    backend: str
    n_members: int
    pred_cov: np.ndarray
    upd_cov: np.ndarray
    pred_mean: Optional[np.ndarray] = None
    upd_mean: Optional[np.ndarray] = None


def run_filter(backend, n, rng, observations=None, size=(), p_init=None):
    """Run ``n`` update-prediction cycles and record every step.

    Parameters
    ----------
    observations : ndarray [..., n+1, d0] or None
        None runs with zero observations (covariances do not depend on them).
    p_init : ndarray or None
        Start the covariance chain from a fixed matrix (chain backend only).
    """
    params = backend.params
    size = tuple(size)
    if p_init is not None:
        if backend.name != "wishart-chain":
            raise ValueError("p_init is only supported by the wishart-chain backend")
        state = PerturbationState(cov=np.broadcast_to(np.asarray(p_init, float),
                                                      size + (params.d, params.d)).copy())
    else:
        state = backend.init(rng, size)
    batch = state.batch
    d = params.d
    pred_cov = np.empty(batch + (n + 1, d, d))
    upd_cov = np.empty_like(pred_cov)
    has_mean = state.mean is not None
    pred_mean = np.empty(batch + (n + 1, d)) if has_mean else None
    upd_mean = np.empty_like(pred_mean) if has_mean else None
    for k in range(n + 1):
        pred_cov[..., k, :, :] = state.cov
        if has_mean:
            pred_mean[..., k, :] = state.mean
        y = None if observations is None else observations[..., k, :]
        state = backend.update(state, y, rng)
        upd_cov[..., k, :, :] = state.cov
        if has_mean:
            upd_mean[..., k, :] = state.mean
        if k < n:
            state = backend.predict(state, rng)
    return EnkfRun(backend=backend.name, n_members=backend.n_members, pred_cov=pred_cov,
                   upd_cov=upd_cov, pred_mean=pred_mean, upd_mean=upd_mean)


# -- analysis helpers ----------------------------------------------------------

def interpolation_terms(params, covs):
    """Terms ``E_{n-k}(p_k) M_k E_{n-k}(phi(p_{k-1}))'`` with ``M_k = p_k - phi(p_{k-1})``.

    ``covs`` holds ``p_0..p_n`` along axis -3; ``phi(p_{-1}) = P0``.  The
    terms sum to ``p_n - P_n``.
    """
    covs = np.asarray(covs, dtype=float)
    n = covs.shape[-3] - 1
    prev = np.concatenate([np.broadcast_to(params.p0, covs[..., :1, :, :].shape),
                           phi(params, covs[..., :-1, :, :])], axis=-3)
    terms = []
    for k in range(n + 1):
        left = e_n_product(params, covs[..., k, :, :], n - k)
        right = e_n_product(params, prev[..., k, :, :], n - k)
        terms.append(left @ (covs[..., k, :, :] - prev[..., k, :, :]) @ _t(right))
    return np.stack(terms, axis=-3)


def martingale_correction(params, covs):
    """``sum_k E_{n-k}(phi(p_{k-1})) M_k E_{n-k}(phi(p_{k-1}))'``, a mean-zero term.

    Each summand is a predictable matrix sandwiching a conditionally centered
    increment, so subtracting it from ``p_n`` leaves the mean unchanged and
    removes the leading-order fluctuation.
    """
    covs = np.asarray(covs, dtype=float)
    n = covs.shape[-3] - 1
    total = np.zeros(covs.shape[:-3] + covs.shape[-2:])
    for k in range(n + 1):
        prev = params.p0 if k == 0 else phi(params, covs[..., k - 1, :, :])
        prev = np.broadcast_to(prev, total.shape)
        e = e_n_product(params, prev, n - k)
        total = total + e @ (covs[..., k, :, :] - prev) @ _t(e)
    return sym_part(total)


def lambda_limit_draw(params, pred_covs, n, rng, size=()):
    """Limit fluctuation ``Lambda_n = A Gamma_hat_{n-1} A' + Gamma_n``.

    ``Gamma_n = R_n^{1/2} H R_n^{1/2} + 2 sym(R^{1/2} G (A P_hat_{n-1} A')^{1/2})``
    with ``R_0 = P0``, ``P_hat_{-1} = 0`` and ``Gamma_hat`` built from
    ``(R_hat(P_n), A_hat(P_n) P_n A_hat(P_n)')``.  ``(G, H)`` pairs are an
    independent Gaussian block and GOE matrix.
    """
    size = tuple(size)
    d = params.d
    if n == 0:
        return assemble_delta(principal_sqrt(params.p0), goe(rng, d, size),
                              np.zeros(size + (d, d)), np.zeros((d, d)))
    p_prev = pred_covs[n - 1]
    k = kalman.gain(params, p_prev)
    a_h = np.eye(d) - k @ params.b
    gamma_hat = assemble_delta(principal_sqrt(kalman.r_hat(params, p_prev, k)), goe(rng, d, size),
                               rng.standard_normal(size + (d, d)),
                               principal_sqrt(sym_part(a_h @ p_prev @ a_h.T)))
    upd_prev = kalman.updated_cov(params, p_prev, k=k)
    gamma = assemble_delta(principal_sqrt(params.r), goe(rng, d, size),
                           rng.standard_normal(size + (d, d)),
                           principal_sqrt(sym_part(params.a @ upd_prev @ params.a.T)))
    return sym_part(params.a @ gamma_hat @ params.a.T) + gamma


def clt_limit_draw(params, pred_covs, n, rng, size=()):
    """Draws of ``sum_k E_{n-k}(P_k) Lambda_k E_{n-k}(P_k)'``, the limit law of ``sqrt(N)(p_n - P_n)``."""
    size = tuple(size)
    total = np.zeros(size + (params.d, params.d))
    for k in range(n + 1):
        e = e_n_product(params, pred_covs[k], n - k)
        total = total + e @ lambda_limit_draw(params, pred_covs, k, rng, size) @ e.T
    return sym_part(total)
