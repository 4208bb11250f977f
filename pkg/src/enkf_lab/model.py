"""Linear-Gaussian signal/observation model.

    X_{n+1} = A X_n + W_n,    Y_n = B X_n + V_n

with ``W_n ~ N(0, R)``, ``V_n ~ N(0, R0)`` and ``X_0 ~ N(x0_mean, P0)``.
"""
from dataclasses import dataclass, field
import json

import numpy as np

from enkf_lab.linalg import (DimensionError, NotPositiveDefiniteError, as_spd,
                             principal_sqrt, spd_inv, sym_part)
from enkf_lab.rng import stream


class ConfigError(ValueError):
    """Malformed model or run configuration."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Validated model matrices.  Build through :func:`validate`."""

    a: np.ndarray
    b: np.ndarray
    r: np.ndarray
    r0: np.ndarray
    p0: np.ndarray
    x0_mean: np.ndarray
    s: np.ndarray = field(repr=False)

    @property
    def d(self):
        return self.a.shape[0]

    @property
    def d0(self):
        return self.b.shape[0]

    def to_dict(self):
        return {
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "r": self.r.tolist(),
            "r0": self.r0.tolist(),
            "p0": self.p0.tolist(),
            "x0_mean": self.x0_mean.tolist(),
        }

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in ("a", "b", "r", "r0", "p0", "x0_mean")}
        fields.update(changes)
        return validate(**fields)


def _matrix(value, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got {arr.ndim}-d array")
    return arr


def validate(a, b, r, r0, p0, x0_mean=None):
    """Check shapes and definiteness and derive ``S = B' R0^{-1} B``.

    Raises
    ------
    DimensionError
        Non-conformal shapes.
    NotPositiveDefiniteError
        ``R``, ``R0`` or ``P0`` not strictly positive definite.
    """
    a = _matrix(a, "a")
    b = _matrix(b, "b")
    d = a.shape[0]
    if a.shape != (d, d):
        raise DimensionError(f"a must be square, got {a.shape}")
    if b.shape[1] != d:
        raise DimensionError(f"b has shape {b.shape}, expected (d0, {d})")
    d0 = b.shape[0]
    r = _matrix(r, "r")
    r0 = _matrix(r0, "r0")
    p0 = _matrix(p0, "p0")
    for name, mat, dim in (("r", r, d), ("r0", r0, d0), ("p0", p0, d)):
        if mat.shape != (dim, dim):
            raise DimensionError(f"{name} has shape {mat.shape}, expected ({dim}, {dim})")
    r = as_spd(r, definite=True, name="r")
    r0 = as_spd(r0, definite=True, name="r0")
    p0 = as_spd(p0, definite=True, name="p0")
    if x0_mean is None:
        x0_mean = np.zeros(d)
    x0_mean = np.asarray(x0_mean, dtype=float).reshape(-1)
    if x0_mean.shape != (d,):
        raise DimensionError(f"x0_mean has length {x0_mean.size}, expected {d}")
    s = sym_part(b.T @ spd_inv(r0) @ b)
    params = ModelParams(a=a, b=b, r=r, r0=r0, p0=p0, x0_mean=x0_mean, s=s)
    for arr in (a, b, r, r0, p0, x0_mean, s):
        arr.setflags(write=False)
    return params


def from_dict(doc):
    """Build params from the JSON field layout (a, b, r, r0, p0, x0_mean)."""
    missing = [k for k in ("a", "b", "r", "r0", "p0") if k not in doc]
    if missing:
        raise ConfigError(f"model is missing field(s): {', '.join(missing)}")
    try:
        return validate(doc["a"], doc["b"], doc["r"], doc["r0"], doc["p0"], doc.get("x0_mean"))
    except (DimensionError, NotPositiveDefiniteError) as exc:
        raise ConfigError(f"invalid model: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model field: {exc}") from exc


def load_json(path):
    with open(path) as fh:
        return from_dict(json.load(fh))


def scalar_model(a=1.0, b=1.0, r=1.0, r0=1.0, p0=1.0, x0_mean=0.0):
    return validate([[a]], [[b]], [[r]], [[r0]], [[p0]], [x0_mean])


def golden_model():
    """Scalar model A=B=R=R0=P0=1 whose Riccati fixed point is the golden ratio."""
    return scalar_model()


@dataclass
class PathSample:
    states: np.ndarray        # (n+1, d)
    observations: np.ndarray  # (n+1, d0)
    seed: int


def simulate_paths(params, n, rng, size=()):
    """Draw ground-truth trajectories.

    Returns
    -------
    states : ndarray [*size, n+1, d]
    observations : ndarray [*size, n+1, d0]
    """
    size = tuple(np.atleast_1d(size)) if size != () else ()
    d, d0 = params.d, params.d0
    r_sqrt = principal_sqrt(params.r)
    r0_sqrt = principal_sqrt(params.r0)
    p0_sqrt = principal_sqrt(params.p0)
    states = np.empty(size + (n + 1, d))
    obs = np.empty(size + (n + 1, d0))
    x = params.x0_mean + rng.standard_normal(size + (d,)) @ p0_sqrt.T
    for k in range(n + 1):
        states[..., k, :] = x
        obs[..., k, :] = x @ params.b.T + rng.standard_normal(size + (d0,)) @ r0_sqrt.T
        if k < n:
            x = x @ params.a.T + rng.standard_normal(size + (d,)) @ r_sqrt.T
    return states, obs


def simulate_path(params, n, seed):
    """One reproducible trajectory ``X_0..X_n``, ``Y_0..Y_n``."""
    states, obs = simulate_paths(params, n, stream(seed, "simulate"))
    return PathSample(states=states, observations=obs, seed=int(seed))


def sample_gaussian_matrix(rows, cols, cov, rng):
    """``rows x cols`` matrix with i.i.d. ``N(0, cov)`` columns."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (rows, rows):
        raise DimensionError(f"cov has shape {cov.shape}, expected ({rows}, {rows})")
    return principal_sqrt(cov) @ rng.standard_normal((rows, cols))
