"""Gaussian matrices and non-central Wishart fluctuations.

Conventions
-----------
For ``z, Z`` of shape ``(d, N)`` with ``Z`` columns i.i.d. ``N(0, R)``,
``q(z) = z z' / N`` and ``N q(z + Z) ~ Wishart_d(N, N q(z), R)``.  Since the
law only depends on ``q(z)``, samplers take the non-centrality through its
principal square root ``q^{1/2}`` and realize ``z = sqrt(N) [q^{1/2} | 0]``.
With that choice

    q(z + R^{1/2} Z) = q(z) + R + Delta / sqrt(N)

holds pathwise, where ``Delta = R^{1/2} H R^{1/2} + 2 sym(R^{1/2} G q^{1/2})``,
``H = (Z Z' - N I) / sqrt(N)`` and ``G`` is the first ``d`` columns of ``Z``.
"""
from dataclasses import dataclass

import numpy as np

from enkf_lab.linalg import (DimensionError, as_spd, pd_tolerance, principal_sqrt, spd_inv,
                             sym_part)


@dataclass(frozen=True, eq=False)
class WishartParams:
    """``Wishart_d(N, N q, R)`` parametrized by ``(N, R, q^{1/2})``."""

    dof: int
    scale: np.ndarray
    nc_sqrt: np.ndarray

    def __post_init__(self):
        if self.dof < 1:
            raise ValueError("dof must be >= 1")

    @property
    def d(self):
        return self.scale.shape[-1]

    @property
    def noncentrality(self):
        return sym_part(self.nc_sqrt @ self.nc_sqrt)

    @classmethod
    def from_noncentrality(cls, dof, scale, q=None):
        scale = as_spd(np.atleast_2d(np.asarray(scale, dtype=float)), name="scale")
        if q is None:
            q = np.zeros_like(scale)
        q = as_spd(np.atleast_2d(np.asarray(q, dtype=float)), name="noncentrality")
        return cls(int(dof), scale, principal_sqrt(q))


@dataclass
class FluctuationDraw:
    h_matrix: np.ndarray
    g_block: np.ndarray
    h_tail: np.ndarray
    delta: np.ndarray


def _t(a):
    return np.swapaxes(a, -1, -2)


def h_matrix(z):
    """``(Z Z' - N I) / sqrt(N)`` for a ``d x N`` standard block (batched)."""
    z = np.asarray(z, dtype=float)
    n = z.shape[-1]
    if n < 1:
        raise ValueError("need at least one column")
    return sym_part((z @ _t(z) - n * np.eye(z.shape[-2])) / np.sqrt(n))


def assemble_delta(scale_sqrt, h, g, nc_sqrt):
    """``R^{1/2} H R^{1/2} + 2 sym(R^{1/2} G q^{1/2})``."""
    cross = scale_sqrt @ g @ nc_sqrt
    return sym_part(scale_sqrt @ h @ scale_sqrt + cross + _t(cross))


def goe(rng, d, size=()):
    """Gaussian orthogonal ensemble draw ``(G + G') / sqrt(2)``."""
    g = rng.standard_normal(tuple(size) + (d, d))
    return (g + _t(g)) / np.sqrt(2.0)


def central_wishart_identity(rng, dof, d, size=()):
    """``Wishart_d(dof, I)`` draws (unnormalized).

    Bartlett factorization when ``dof >= d``, an explicit sum of outer
    products otherwise.
    """
    size = tuple(size)
    if dof <= 0:
        return np.zeros(size + (d, d))
    if dof < d:
        z = rng.standard_normal(size + (d, dof))
        return z @ _t(z)
    t = np.zeros(size + (d, d))
    rows, cols = np.tril_indices(d, -1)
    if rows.size:
        t[..., rows, cols] = rng.standard_normal(size + (rows.size,))
    diag = np.sqrt(rng.chisquare(dof - np.arange(d), size=size + (d,)))
    idx = np.arange(d)
    t[..., idx, idx] = diag
    return t @ _t(t)


def sample_h_g(rng, d, dof, size=()):
    """Joint draw of ``(H^N, G)`` without materializing the ``d x N`` block.

    ``Z Z' = G G' + W`` with ``W ~ Wishart_d(N - d, I)`` independent of ``G``.
    """
    if dof < d:
        raise ValueError(f"(H, G) pair needs N >= d (N={dof}, d={d})")
    size = tuple(size)
    g = rng.standard_normal(size + (d, d))
    w = central_wishart_identity(rng, dof - d, d, size)
    h = sym_part((g @ _t(g) + w - dof * np.eye(d)) / np.sqrt(dof))
    return h, g


def noncentral_wishart(rng, dof, nc_sqrt, scale_sqrt, method="bartlett", size=()):
    """Normalized non-central Wishart draws ``q(z + Z)``.

    Parameters
    ----------
    dof : int
        ``N``.
    nc_sqrt, scale_sqrt : ndarray [..., d, d]
        Square roots of the non-centrality ``q(z)`` and of the scale ``R``;
        leading batch dimensions broadcast against ``size``.
    method : {'direct', 'bartlett'}
        ``'direct'`` sums ``N`` outer products.  ``'bartlett'`` writes the
        draw as ``(q^{1/2} + R^{1/2} G / sqrt(N))(...)' + R^{1/2} W R^{1/2} / N``
        with ``W ~ Wishart_d(N - d, I)``, which costs ``O(d^2)`` per draw.
    """
    nc_sqrt = np.asarray(nc_sqrt, dtype=float)
    scale_sqrt = np.asarray(scale_sqrt, dtype=float)
    d = scale_sqrt.shape[-1]
    batch = np.broadcast_shapes(tuple(size), nc_sqrt.shape[:-2], scale_sqrt.shape[:-2])
    root_n = np.sqrt(dof)
    if dof < d:
        # rank(q) <= N is needed for a d x N mean block with z z' / N = q
        lam, vec = np.linalg.eigh(sym_part(nc_sqrt @ nc_sqrt))
        if np.any(lam[..., : d - dof] > pd_tolerance(lam)[..., None]):
            raise ValueError(f"non-centrality of rank > N={dof} cannot be realized")
        factor = vec[..., :, d - dof:] * np.sqrt(np.clip(lam[..., None, d - dof:], 0.0, None))
        z = rng.standard_normal(batch + (d, dof))
        y = scale_sqrt @ z + root_n * factor
        return sym_part(y @ _t(y) / dof)
    if method == "direct":
        z = rng.standard_normal(batch + (d, dof))
        y = scale_sqrt @ z
        y[..., :, :d] += root_n * nc_sqrt
        return sym_part(y @ _t(y) / dof)
    if method != "bartlett":
        raise ValueError(f"unknown method {method!r}")
    g = rng.standard_normal(batch + (d, d))
    lead = nc_sqrt + scale_sqrt @ g / root_n
    w = central_wishart_identity(rng, dof - d, d, batch)
    return sym_part(lead @ _t(lead) + scale_sqrt @ w @ scale_sqrt / dof)


def sample_noncentral_wishart(wp, rng, size=(), method="direct"):
    """Draw ``q(z + Z) ~ Wishart_d(N, N q, R) / N``."""
    return noncentral_wishart(rng, wp.dof, wp.nc_sqrt, principal_sqrt(wp.scale),
                              method=method, size=size)


def delta_decomposition(wp, rng, size=()):
    """Draw ``(H^N, G, H_tail)`` from one standard block and assemble ``Delta``.

    ``q + R + Delta / sqrt(N)`` then equals the direct sampler's draw for the
    same block.
    """
    d, n = wp.d, wp.dof
    if n < d:
        raise ValueError(f"delta decomposition needs N >= d (N={n}, d={d})")
    z = rng.standard_normal(tuple(size) + (d, n))
    h = h_matrix(z)
    g = z[..., :, :d]
    tail = h_matrix(z[..., :, d:]) if n > d else None
    delta = assemble_delta(principal_sqrt(wp.scale), h, g, wp.nc_sqrt)
    return FluctuationDraw(h_matrix=h, g_block=g, h_tail=tail, delta=delta)


def delta_variance(wp):
    """Closed-form ``E(Delta^2)``:
    ``R^2 + Tr(R) R + q R + R q + Tr(R) q + Tr(q) R``.
    """
    r = wp.scale
    q = wp.noncentrality
    tr_r, tr_q = np.trace(r), np.trace(q)
    return sym_part(r @ r + tr_r * r + q @ r + r @ q + tr_r * q + tr_q * r)


def delta_sandwich(wp, m):
    """Closed-form ``E(Delta M Delta)`` for a fixed ``d x d`` matrix ``M``.

    ``R M' R + Tr(M R) R + R M' q + q M' R + Tr(M R) q + Tr(M q) R``;
    ``M = I`` recovers :func:`delta_variance`.
    """
    r = wp.scale
    q = wp.noncentrality
    m = np.asarray(m, dtype=float)
    mt = m.T
    tr_mr, tr_mq = np.trace(m @ r), np.trace(m @ q)
    return r @ mt @ r + tr_mr * r + r @ mt @ q + q @ mt @ r + tr_mr * q + tr_mq * r


def h_split(z):
    """Split ``H^N`` into the tail built from columns ``d+1..N`` and a mixing term.

    Returns ``(h_tail, h_mix)`` with ``H^N = h_tail + sqrt(d/N) h_mix``.
    """
    z = np.asarray(z, dtype=float)
    d, n = z.shape[-2], z.shape[-1]
    if n <= d:
        raise ValueError(f"h_split needs N > d (N={n}, d={d})")
    tail = h_matrix(z[..., :, d:])
    h_d = h_matrix(z[..., :, :d])
    ratio = n / d
    mix = h_d - tail / (np.sqrt(ratio - 1.0) + np.sqrt(ratio))
    return tail, mix


def inverse_moment_bounds(wp):
    """Loewner bounds ``(q + R)^{-1} <= E(q(z+Z)^{-1}) <= R^{-1} / (1 - (2d+1)/N)``."""
    d, n = wp.d, wp.dof
    if n <= 2 * d + 1:
        raise ValueError(f"inverse-moment bound needs N > 2d+1 (N={n}, d={d})")
    lower = spd_inv(wp.noncentrality + wp.scale)
    upper = spd_inv(wp.scale) / (1.0 - (2 * d + 1) / n)
    return lower, upper


def central_inverse_mean(wp):
    """``E(q(Z)^{-1}) = R^{-1} / (1 - (d+1)/N)`` for the central case."""
    d, n = wp.d, wp.dof
    if n <= d + 1:
        raise ValueError(f"central inverse mean needs N > d+1 (N={n}, d={d})")
    return spd_inv(wp.scale) / (1.0 - (d + 1) / n)


def helmert(n):
    """``n x n`` Helmert matrix; row 1 is ``1'/sqrt(n)``, the rest are mean-free."""
    if n < 2:
        raise ValueError("Helmert matrix needs n >= 2")
    o = np.zeros((n, n))
    o[0] = 1.0 / np.sqrt(n)
    for i in range(2, n + 1):
        c = 1.0 / np.sqrt(i * (i - 1))
        o[i - 1, : i - 1] = c
        o[i - 1, i - 1] = -(i - 1) * c
    return o


def sample_mean_cov(x):
    """Sample mean ``m(x)`` and normalized covariance ``p(x) = (x - M(x))(x - M(x))' / N``.

    ``x`` has ``N + 1`` columns; batched over leading axes.
    """
    x = np.asarray(x, dtype=float)
    n1 = x.shape[-1]
    if n1 < 2:
        raise ValueError("need at least two columns")
    m = x.mean(axis=-1)
    xc = x - m[..., None]
    return m, sym_part(xc @ _t(xc) / (n1 - 1))


def mean_cov_pair(x, r, rng):
    """Sample ``(m(x + Z), p(x + Z))`` for ``Z`` with i.i.d. ``N(0, R)`` columns.

    The Helmert rotation sends ``Z`` to an independent mean part and ``N``
    i.i.d. columns, so ``p(x + Z) = q(x O_bar' + Z_rot)`` with ``q(x O_bar') = p(x)``.

    Returns
    -------
    mean : ndarray [d]
    cov : ndarray [d, d]
    noise : ndarray [d, N+1]
        The column noise ``Z`` realized by the rotation, for pathwise checks.
    """
    x = np.asarray(x, dtype=float)
    d, n1 = x.shape
    n = n1 - 1
    if n <= d:
        raise DimensionError(f"mean_cov_pair needs N > d (N={n}, d={d})")
    r_sqrt = principal_sqrt(r)
    o = helmert(n1)
    o_bar = o[1:]
    z0 = r_sqrt @ rng.standard_normal(d)
    z = r_sqrt @ rng.standard_normal((d, n))
    x_bar = x @ o_bar.T
    mean = x.mean(axis=1) + z0 / np.sqrt(n1)
    cov = sym_part((x_bar + z) @ (x_bar + z).T / n)
    noise = np.column_stack([z0, z]) @ o
    return mean, cov, noise
