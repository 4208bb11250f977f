"""Symmetric-matrix kernel.

Every function accepts stacked inputs of shape ``(..., d, d)`` so that the
Monte Carlo code can push whole batches of replicas through one call.
Covariance-valued outputs are always symmetrized before they are returned.
"""
import numpy as np


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix that must be PSD/PD has a clearly negative eigenvalue."""


class DimensionError(ValueError):
    """Raised on non-conformal shapes."""


def pd_tolerance(eigvals):
    """Definiteness tolerance ``1e-10 * (1 + largest eigenvalue)``."""
    eigvals = np.asarray(eigvals)
    return 1e-10 * (1.0 + np.max(np.abs(eigvals), axis=-1))


def _check_square(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    return a


def sym_part(a):
    """Return the symmetric part ``(A + A') / 2``."""
    a = _check_square(a)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def as_spd(a, definite=False, name="matrix"):
    """Validate and symmetrize a covariance matrix.

    Parameters
    ----------
    a : array_like [..., d, d]
    definite : bool
        Require strictly positive definite (smallest eigenvalue above the
        tolerance) instead of semidefinite.

    Returns
    -------
    ndarray
        The symmetrized matrix.
    """
    s = sym_part(a)
    lam = np.linalg.eigvalsh(s)
    tol = pd_tolerance(lam)
    lo = lam[..., 0]
    if np.any(lo < -tol):
        raise NotPositiveDefiniteError(
            f"{name} is not positive semidefinite (smallest eigenvalue {np.min(lo):.3e})")
    if definite and np.any(lo <= tol):
        raise NotPositiveDefiniteError(
            f"{name} is not positive definite (smallest eigenvalue {np.min(lo):.3e})")
    return s


def psd_eigh(s, name="matrix"):
    """Eigen-decomposition of a PSD matrix with round-off eigenvalues clamped to 0."""
    s = sym_part(s)
    lam, vec = np.linalg.eigh(s)
    tol = pd_tolerance(lam)
    if np.any(lam[..., 0] < -tol):
        raise NotPositiveDefiniteError(
            f"{name} is not positive semidefinite (smallest eigenvalue {np.min(lam[..., 0]):.3e})")
    return np.clip(lam, 0.0, None), vec


def principal_sqrt(s):
    """Principal symmetric square root of a PSD matrix."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] == 1:
        val = s[..., 0, 0]
        if np.any(val < -1e-10 * (1.0 + np.abs(val))):
            raise NotPositiveDefiniteError("matrix is not positive semidefinite")
        return np.sqrt(np.clip(s, 0.0, None))
    lam, vec = psd_eigh(s)
    root = (vec * np.sqrt(lam)[..., None, :]) @ np.swapaxes(vec, -1, -2)
    return sym_part(root)


def spd_inv(s):
    """Inverse of an SPD matrix through a Cholesky solve."""
    s = sym_part(s)
    chol = np.linalg.cholesky(s)
    eye = np.broadcast_to(np.eye(s.shape[-1]), s.shape)
    linv = np.linalg.solve(chol, eye)
    return sym_part(np.swapaxes(linv, -1, -2) @ linv)


def loewner_leq(s1, s2, tol=0.0):
    """True iff ``s1 <= s2`` in the Loewner order, up to ``tol``."""
    s1 = _check_square(s1, "s1")
    s2 = _check_square(s2, "s2")
    if s1.shape != s2.shape:
        raise DimensionError(f"shape mismatch {s1.shape} vs {s2.shape}")
    lam = np.linalg.eigvalsh(sym_part(s2 - s1))
    return bool(np.all(lam[..., 0] >= -tol))


def lambda_min(s):
    return np.linalg.eigvalsh(sym_part(s))[..., 0]


def lambda_max(s):
    return np.linalg.eigvalsh(sym_part(s))[..., -1]


def spectral_radius(a):
    """Largest eigenvalue modulus (eigenvalues may be complex)."""
    a = _check_square(a)
    eig = np.linalg.eigvals(a)
    return np.max(np.abs(eig), axis=-1)


def matrix_norm(a, kind="frobenius"):
    """Spectral (``'spectral'``) or Frobenius (``'frobenius'``) norm."""
    a = np.asarray(a, dtype=float)
    if kind == "frobenius":
        return np.sqrt(np.sum(a * a, axis=(-2, -1)))
    if kind == "spectral":
        return np.linalg.norm(a, ord=2, axis=(-2, -1))
    raise ValueError(f"unknown norm kind {kind!r}")


def woodbury_inverse(m, u, n, v):
    """``(M + U N V)^{-1}`` via the Sherman-Morrison-Woodbury identity.

    ``M^{-1} - M^{-1} U (N^{-1} + V M^{-1} U)^{-1} V M^{-1}``.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n = np.atleast_2d(np.asarray(n, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if (m.shape[0] != m.shape[1] or n.shape[0] != n.shape[1]
            or u.shape != (m.shape[0], n.shape[0]) or v.shape != (n.shape[0], m.shape[0])):
        raise DimensionError(
            f"non-conformal shapes M{m.shape} U{u.shape} N{n.shape} V{v.shape}")
    try:
        m_inv_u = np.linalg.solve(m, u)
        m_inv = np.linalg.solve(m, np.eye(m.shape[0]))
        core = np.linalg.inv(n) + v @ m_inv_u
        return m_inv - m_inv_u @ np.linalg.solve(core, v @ m_inv)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular input to woodbury_inverse: {exc}") from exc


def rel_err(a, b):
    """Frobenius distance relative to ``max(1, |a|, |b|)``."""
    diff = matrix_norm(np.asarray(a) - np.asarray(b))
    scale = np.maximum(1.0, np.maximum(matrix_norm(np.asarray(a)), matrix_norm(np.asarray(b))))
    return diff / scale


def random_spd(rng, d, low=0.1, high=10.0, size=None):
    """Random SPD matrix with eigenvalues uniform on ``[low, high]``."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    g = rng.standard_normal(shape + (d, d))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[..., None, :]
    lam = rng.uniform(low, high, size=shape + (d,))
    return sym_part((q * lam[..., None, :]) @ np.swapaxes(q, -1, -2))
