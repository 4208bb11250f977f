"""Small statistical toolkit shared by the studies."""
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    stderr: float
    ci: tuple
    n_points: int

    def to_dict(self):
        out = asdict(self)
        out["ci"] = list(self.ci)
        return out


def fit_line(x, y, level=0.95):
    """OLS fit of ``y = a + b x`` with a t-based CI on the slope."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    n = x.size
    if n < 5:
        raise ValueError(f"slope fit needs at least 5 points, got {n}")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ValueError("x values are all equal")
    slope = float(xc @ (y - y.mean()) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    sigma2 = float(resid @ resid) / (n - 2)
    se = np.sqrt(sigma2 / sxx)
    half = stats.t.ppf(0.5 + level / 2.0, n - 2) * se
    return LineFit(slope, intercept, float(se), (slope - half, slope + half), n)


def fit_loglog_slope(x, y, level=0.95):
    """Power-law exponent: OLS on ``(log x, log y)``.

    >>> round(fit_loglog_slope([1, 2, 4, 8, 16], [1, .5, .25, .125, .0625]).slope, 12)
    -1.0
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive values")
    return fit_line(np.log(x), np.log(y), level)


def mean_se(x, axis=0):
    """Sample mean and its standard error along ``axis``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 2:
        raise ValueError("need at least two replicas for a standard error")
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / np.sqrt(n)


def var_se(x, axis=0):
    """Sample variance and its large-sample standard error."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    xc = x - x.mean(axis=axis, keepdims=True)
    var = (xc ** 2).sum(axis=axis) / (n - 1)
    m4 = (xc ** 4).mean(axis=axis)
    return var, np.sqrt(np.maximum(m4 - var ** 2, 0.0) / n)


def bonferroni_z(alpha, m):
    """Two-sided normal quantile at family-wise level ``alpha`` over ``m`` checks."""
    return float(stats.norm.ppf(1.0 - alpha / (2.0 * max(int(m), 1))))


def psd_within_ci(estimate, se, z):
    """``lambda_min(estimate + z |se|_F I) >= 0``; returns (passed, margin).

    Margins down to ``-1e-12 (1 + |estimate|_F)`` count as round-off.
    """
    estimate = np.asarray(estimate, dtype=float)
    infl = z * np.sqrt((np.asarray(se, dtype=float) ** 2).sum(axis=(-2, -1)))
    lam = np.linalg.eigvalsh(0.5 * (estimate + np.swapaxes(estimate, -1, -2)))[..., 0]
    margin = lam + infl
    slack = 1e-12 * (1.0 + np.sqrt((estimate ** 2).sum(axis=(-2, -1))))
    return bool(np.all(margin >= -slack)), margin


def loewner_leq_within_ci(lower, upper, se, z):
    """``lower <= upper`` up to the CI inflation of ``upper - lower``."""
    return psd_within_ci(np.asarray(upper) - np.asarray(lower), se, z)


def functionals(mats, kind="spd"):
    """Scalar summaries for distribution tests.

    ``kind='spd'`` gives trace, log-determinant and largest eigenvalue;
    ``kind='sym'`` (indefinite matrices) gives trace, largest and smallest
    eigenvalue.  For ``d = 1`` all three coincide and only the trace is kept.
    """
    mats = np.asarray(mats, dtype=float)
    tr = np.trace(mats, axis1=-2, axis2=-1)
    if mats.shape[-1] == 1:
        return {"trace": tr}
    lam = np.linalg.eigvalsh(mats)
    if kind == "spd":
        return {"trace": tr, "logdet": np.linalg.slogdet(mats)[1], "lambda_max": lam[..., -1]}
    return {"trace": tr, "lambda_max": lam[..., -1], "lambda_min": lam[..., 0]}


def ks_battery(a, b, kind="spd", alpha=0.01, label=""):
    """Two-sample KS tests on :func:`functionals`, Bonferroni-corrected.

    Returns a list of dicts (one per functional) with statistic, p-value and
    the per-test threshold ``alpha / m``.
    """
    fa, fb = functionals(a, kind), functionals(b, kind)
    m = len(fa)
    out = []
    for name in fa:
        res = stats.ks_2samp(fa[name], fb[name])
        out.append({"comparison": label, "functional": name, "statistic": float(res.statistic),
                    "pvalue": float(res.pvalue), "threshold": alpha / m,
                    "passed": bool(res.pvalue > alpha / m)})
    return out


def ks_distance(x, y):
    return float(stats.ks_2samp(x, y).statistic)
