"""Exact Kalman filter and the gain identities used by the EnKF analysis.

All matrix functions broadcast over leading batch dimensions of ``P``.
"""
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from enkf_lab.linalg import sym_part

GAIN_COND_LIMIT = 1e14


class GainConditioningError(ArithmeticError):
    """The innovation covariance ``B P B' + R0`` is numerically singular."""


def innovation_cov(params, p):
    b = params.b
    return sym_part(b @ p @ b.T + params.r0)


def gain(params, p):
    """Kalman gain ``K(P) = P B' (B P B' + R0)^{-1}``."""
    p = np.asarray(p, dtype=float)
    c = innovation_cov(params, p)
    lam = np.linalg.eigvalsh(c)
    if np.any(lam[..., -1] > GAIN_COND_LIMIT * lam[..., 0]):
        raise GainConditioningError("innovation covariance condition number exceeds 1e14")
    # C is symmetric, so (C^{-1} B P)' = P B' C^{-1}
    return np.swapaxes(np.linalg.solve(c, params.b @ p), -1, -2)


def a_hat(params, p):
    """``(I + P S)^{-1}``, equal to ``I - K(P) B``."""
    p = np.asarray(p, dtype=float)
    eye = np.eye(params.d)
    return np.linalg.solve(eye + p @ params.s, np.broadcast_to(eye, p.shape))


def r_hat(params, p, k=None):
    """``K(P) R0 K(P)'``."""
    if k is None:
        k = gain(params, p)
    return sym_part(k @ params.r0 @ np.swapaxes(k, -1, -2))


def updated_cov(params, p, joseph=False, k=None):
    """Updated covariance ``A_hat(P) P``; Joseph form computes ``A_hat P A_hat' + R_hat``."""
    p = np.asarray(p, dtype=float)
    if k is None:
        k = gain(params, p)
    if joseph:
        ah = np.eye(params.d) - k @ params.b
        return sym_part(ah @ p @ np.swapaxes(ah, -1, -2) + r_hat(params, p, k))
    return sym_part(p - k @ params.b @ p)


def predicted_cov(params, p_hat):
    return sym_part(params.a @ p_hat @ params.a.T + params.r)


@dataclass
class KalmanState:
    step: int
    pred_mean: np.ndarray
    pred_cov: np.ndarray
    upd_mean: Optional[np.ndarray] = None
    upd_cov: Optional[np.ndarray] = None
    gain: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class KalmanTrajectory:
    states: list

    def __len__(self):
        return len(self.states)

    def __getitem__(self, n):
        return self.states[n]

    @property
    def pred_covs(self):
        return np.stack([s.pred_cov for s in self.states])

    @property
    def upd_covs(self):
        return np.stack([s.upd_cov for s in self.states if s.upd_cov is not None])

    @property
    def gains(self):
        return np.stack([s.gain for s in self.states if s.gain is not None])


def initial_state(params):
    return KalmanState(step=0, pred_mean=params.x0_mean.copy(), pred_cov=params.p0.copy())


def kf_update(params, state, y, joseph=False):
    """Updating step ``(X^-_n, P_n) -> (X_n, P^_n)``."""
    k = gain(params, state.pred_cov)
    innov = np.asarray(y, dtype=float) - params.b @ state.pred_mean
    upd_mean = state.pred_mean + k @ innov
    upd_cov = updated_cov(params, state.pred_cov, joseph=joseph, k=k)
    return replace(state, upd_mean=upd_mean, upd_cov=upd_cov, gain=k)


def kf_predict(params, state):
    """Prediction step ``(X_n, P^_n) -> (X^-_{n+1}, P_{n+1})``."""
    if state.upd_cov is None:
        raise ValueError("kf_predict needs an updated state")
    return KalmanState(step=state.step + 1,
                       pred_mean=params.a @ state.upd_mean,
                       pred_cov=predicted_cov(params, state.upd_cov))


def kf_run(params, observations, joseph=False):
    """Filter ``Y_0..Y_n``; returns states ``0..n`` with both halves filled.

    An empty observation sequence returns the single initial predictor.
    """
    observations = np.asarray(observations, dtype=float).reshape(-1, params.d0)
    state = initial_state(params)
    if len(observations) == 0:
        return KalmanTrajectory([state])
    states = []
    for n, y in enumerate(observations):
        state = kf_update(params, state, y, joseph=joseph)
        states.append(state)
        if n + 1 < len(observations):
            state = kf_predict(params, state)
    return KalmanTrajectory(states)


def covariance_path(params, n, p0=None):
    """Observation-free covariance recursion.

    Returns
    -------
    pred : ndarray [n+1, d, d]
        ``P_0..P_n``
    upd : ndarray [n+1, d, d]
        ``P^_0..P^_n``
    gains : ndarray [n+1, d, d0]
    """
    p = params.p0 if p0 is None else np.asarray(p0, dtype=float)
    pred, upd, gains = [], [], []
    for _ in range(n + 1):
        k = gain(params, p)
        ph = updated_cov(params, p, k=k)
        pred.append(p)
        upd.append(ph)
        gains.append(k)
        p = predicted_cov(params, ph)
    return np.stack(pred), np.stack(upd), np.stack(gains)


def filter_means(params, observations, gains):
    """Kalman means for a batch of observation paths with precomputed gains.

    Parameters
    ----------
    observations : ndarray [..., n+1, d0]
    gains : ndarray [n+1, d, d0]

    Returns
    -------
    pred_means, upd_means : ndarray [..., n+1, d]
    """
    observations = np.asarray(observations, dtype=float)
    n1 = observations.shape[-2]
    batch = observations.shape[:-2]
    pred = np.empty(batch + (n1, params.d))
    upd = np.empty_like(pred)
    x = np.broadcast_to(params.x0_mean, batch + (params.d,)).copy()
    for k in range(n1):
        pred[..., k, :] = x
        innov = observations[..., k, :] - x @ params.b.T
        xh = x + innov @ gains[k].T
        upd[..., k, :] = xh
        x = xh @ params.a.T
    return pred, upd
