"""Riccati map, its semigroup and fixed point, directed products and the
Floquet-type factorization of those products.

Notation in names: ``e_map`` is the closed-loop map ``A (I + P S)^{-1}``,
``f_map`` is ``S (I + P S)^{-1}`` and ``e_n_*`` are the ordered products of
closed-loop matrices along a Riccati orbit.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from enkf_lab import kalman
from enkf_lab.linalg import matrix_norm, principal_sqrt, spectral_radius, sym_part


class FixedPointError(ArithmeticError):
    """The fixed-point iteration did not converge."""


class NotStabilizableError(ArithmeticError):
    """The closed-loop matrix at the fixed point has spectral radius >= 1."""


class SingularFloquetError(ArithmeticError):
    """``I + (P - P_inf) G_n`` is numerically singular."""


def phi(params, p):
    """Riccati map ``A (I + P S)^{-1} P A' + R``."""
    return kalman.predicted_cov(params, kalman.updated_cov(params, p))


def phi_n(params, p, n):
    """``n``-fold composition of :func:`phi`; ``n = 0`` is the identity."""
    if n < 0:
        raise ValueError("n must be non-negative")
    p = np.asarray(p, dtype=float)
    for _ in range(n):
        p = phi(params, p)
    return p


def orbit(params, p, n):
    """``[P, phi(P), ..., phi_n(P)]`` stacked along axis 0."""
    out = [np.asarray(p, dtype=float)]
    for _ in range(n):
        out.append(phi(params, out[-1]))
    return np.stack(out)


def e_map(params, p):
    """Closed-loop matrix ``A (I + P S)^{-1}``."""
    return params.a @ kalman.a_hat(params, p)


def f_map(params, p):
    """``S (I + P S)^{-1}`` in the symmetric form ``S^{1/2} (I + S^{1/2} P S^{1/2})^{-1} S^{1/2}``."""
    s_half = principal_sqrt(params.s)
    eye = np.eye(params.d)
    core = eye + s_half @ np.asarray(p, dtype=float) @ s_half
    return sym_part(s_half @ np.linalg.solve(core, np.broadcast_to(s_half, core.shape)))


def alpha_bounds(params, p):
    """Scalars ``(alpha_-, alpha_+)`` with ``alpha_- S <= F(P) <= alpha_+ S``."""
    lam_p = np.linalg.eigvalsh(sym_part(p))
    lam_s = np.linalg.eigvalsh(params.s)
    lo = 1.0 / (1.0 + lam_p[..., -1] * lam_s[-1])
    hi = 1.0 / (1.0 + lam_p[..., 0] * lam_s[0])
    return lo, hi


def _dual_phi(a, r_noise, s_info, p):
    eye = np.eye(a.shape[0])
    core = np.linalg.solve(eye + p @ s_info, p)
    return sym_part(a @ core @ a.T + r_noise)


def _iterate(step, d, tol, max_iter):
    """Iterate from 0 until the relative increment is below ``tol``.

    After that the iteration continues while increments keep shrinking, so
    the returned point sits at the round-off floor of ``step``.
    """
    p = np.zeros((d, d))
    converged, last = False, np.inf
    for it in range(1, max_iter + 1):
        nxt = step(p)
        if not matrix_norm(nxt) < 1e150:
            raise FixedPointError("Riccati orbit diverges; the model is not stabilizable")
        inc = float(matrix_norm(nxt - p))
        if converged and inc >= last:
            return p, it - 1
        p, last = nxt, inc
        converged = converged or inc <= tol * matrix_norm(p)
    if converged:
        return p, max_iter
    raise FixedPointError(f"fixed-point iteration did not converge in {max_iter} steps")


@dataclass(frozen=True, eq=False)
class RiccatiContext:
    params: object
    p_inf: np.ndarray
    p_inf_dual: np.ndarray
    closed_loop: np.ndarray
    rho: float
    f_inf: np.ndarray
    g_limit: np.ndarray
    iterations: int

    def to_dict(self):
        return {
            "p_inf": self.p_inf.tolist(),
            "p_inf_dual": self.p_inf_dual.tolist(),
            "rho": float(self.rho),
            "iterations": int(self.iterations),
        }


def fixed_point(params, tol=1e-12, max_iter=100_000):
    """Iterate ``phi`` from 0 to the positive definite fixed point.

    The orbit ``phi_n(0)`` is nondecreasing.  Convergence is declared once
    the relative Frobenius increment drops below ``tol``; a few further
    steps then run while the increment still shrinks.  The dual fixed point
    (``A, R, S`` replaced by ``A', S, R``) is computed the same way.

    Raises
    ------
    FixedPointError
        ``max_iter`` exceeded.
    NotStabilizableError
        ``rho(E(P_inf)) >= 1``.
    """
    d = params.d
    p_inf, iters = _iterate(lambda p: phi(params, p), d, tol, max_iter)
    closed = e_map(params, p_inf)
    rho = float(spectral_radius(closed))
    if not rho < 1.0:
        raise NotStabilizableError(f"closed-loop spectral radius {rho:.6g} >= 1")
    p_dual, _ = _iterate(lambda p: _dual_phi(params.a.T, params.s, params.r, p), d, tol, max_iter)
    f_inf = f_map(params, p_inf)
    g_lim = sym_part(solve_discrete_lyapunov(closed.T, f_inf))
    return RiccatiContext(params=params, p_inf=p_inf, p_inf_dual=p_dual, closed_loop=closed,
                          rho=rho, f_inf=f_inf, g_limit=g_lim, iterations=iters)


def e_n_product(params, p0, n):
    """Directed product ``E(P_{n-1}) ... E(P_1) E(P_0)`` along the orbit of ``p0``.

    Broadcasts over a leading batch of ``p0``.
    """
    p = np.asarray(p0, dtype=float)
    prod = np.broadcast_to(np.eye(params.d), p.shape).copy()
    for _ in range(n):
        prod = e_map(params, p) @ prod
        p = phi(params, p)
    return prod


def closed_loop_power(ctx, n):
    return np.linalg.matrix_power(ctx.closed_loop, n)


def grammian(ctx, n):
    """``G_n = sum_{0<=k<n} (E^k)' F(P_inf) E^k``; ``G_0 = 0``."""
    d = ctx.params.d
    g = np.zeros((d, d))
    ek = np.eye(d)
    for _ in range(n):
        g = g + ek.T @ ctx.f_inf @ ek
        ek = ctx.closed_loop @ ek
    return sym_part(g)


def l_map(ctx, p, n):
    """``L_n(P) = I + (P - P_inf) G_n``."""
    return np.eye(ctx.params.d) + (np.asarray(p, dtype=float) - ctx.p_inf) @ grammian(ctx, n)


def l_inv(ctx, p, n, g=None, check=True):
    """Inverse of ``L_n(P)``.

    Uses ``G_n^{-1} (P + G_n^{-1} - P_inf)^{-1}`` when ``G_n`` is well
    conditioned, a direct solve otherwise.
    """
    p = np.asarray(p, dtype=float)
    d = ctx.params.d
    eye = np.eye(d)
    if n == 0:
        return np.broadcast_to(eye, p.shape).copy()
    if g is None:
        g = grammian(ctx, n)
    lam = np.linalg.eigvalsh(g)
    lmap = eye + (p - ctx.p_inf) @ g
    if lam[0] > 1e-10 * lam[-1]:
        g_inv = np.linalg.inv(g)
        inv = g_inv @ np.linalg.inv(p + (g_inv - ctx.p_inf))
    else:
        try:
            inv = np.linalg.inv(lmap)
        except np.linalg.LinAlgError as exc:
            raise SingularFloquetError(str(exc)) from exc
    if check:
        resid = matrix_norm(lmap @ inv - eye)
        if np.any(~np.isfinite(resid)) or np.any(resid > 1e-10 * np.maximum(1.0, matrix_norm(inv))):
            raise SingularFloquetError(f"L_n(P) inverse residual {np.max(resid):.3e}")
    return inv


def e_n_via_floquet(ctx, p, n):
    """``E(P_inf)^n L_n(P)^{-1}``."""
    return closed_loop_power(ctx, n) @ l_inv(ctx, p, n)


def iota_estimate(ctx, rng, samples=200, n_max=50, scale=10.0):
    """Sampled supremum of ``|L_n(P)^{-1}|_2`` over random PSD ``P`` and ``n <= n_max``.

    An empirical estimate only, not a certified bound.
    """
    d = ctx.params.d
    grams = [grammian(ctx, n) for n in range(1, n_max + 1)]
    best = 0.0
    for _ in range(samples):
        g = rng.standard_normal((d, d))
        p = scale * rng.uniform() * (g @ g.T) / d
        for n, gm in enumerate(grams, start=1):
            best = max(best, float(matrix_norm(l_inv(ctx, p, n, g=gm, check=False), "spectral")))
    return best


def e_n_secant(ctx, q, p, n):
    """Exact secant term ``-E_n(Q) (Q - P) G_n L_n(P)^{-1}``, equal to ``E_n(Q) - E_n(P)``."""
    h = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
    g = grammian(ctx, n)
    return -e_n_product(ctx.params, q, n) @ h @ g @ l_inv(ctx, p, n, g=g)


def e_n_first_second_order(ctx, p, q, n):
    """First-order term and second-order remainder of ``E_n(Q) - E_n(P)``.

    Returns
    -------
    first : ndarray
        ``-E_n(P) H G_n L_n(P)^{-1}`` with ``H = Q - P``.
    remainder : ndarray
        ``E_n(Q) H G_n L_n(P)^{-1} H G_n L_n(P)^{-1}``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    h = q - p
    g = grammian(ctx, n)
    kernel = g @ l_inv(ctx, p, n, g=g)
    first = -e_n_product(ctx.params, p, n) @ h @ kernel
    remainder = e_n_product(ctx.params, q, n) @ h @ kernel @ h @ kernel
    return first, remainder


def gelfand_sequence(ctx, k_max=64):
    """``|E(P_inf)^k|_2^{1/k}`` for ``k = 1..k_max``."""
    out = []
    ek = np.eye(ctx.params.d)
    for k in range(1, k_max + 1):
        ek = ctx.closed_loop @ ek
        out.append(float(matrix_norm(ek, "spectral")) ** (1.0 / k))
    return np.array(out)


def riccati_bounds(params):
    """Lower and upper envelopes ``R`` and ``A S^{-1} A' + R`` (upper is None if S singular)."""
    lam = np.linalg.eigvalsh(params.s)
    if lam[0] <= 1e-12 * max(1.0, lam[-1]):
        return params.r, None
    return params.r, sym_part(params.a @ np.linalg.inv(params.s) @ params.a.T + params.r)

