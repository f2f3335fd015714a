"""Power-law fits on log-log axes."""
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    window: tuple


def _window(n, policy):
    if policy in (None, "drop_first"):
        return (1, n) if n >= 4 else (0, n)
    if policy == "all":
        return (0, n)
    if policy == "drop_last":
        return (0, n - 1)
    if isinstance(policy, tuple):
        return policy
    raise ValueError(f"unknown window policy {policy!r}")


def loglog_fit(xs, ys, window_policy="drop_first"):
    """Least-squares line through (log x, log y).

    The default window drops the smallest-x point (pre-asymptotic) when at
    least four points are available.
    """
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    if xs.shape != ys.shape:
        raise ValueError("xs and ys differ in length")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs positive data")
    order = np.argsort(xs)
    xs, ys = xs[order], ys[order]
    lo, hi = _window(len(xs), window_policy)
    if hi - lo < 3:
        raise ValueError("fit window needs at least three points")
    lx, ly = np.log(xs[lo:hi]), np.log(ys[lo:hi])
    fit = stats.linregress(lx, ly)
    if np.ptp(ly) == 0:
        r2 = 1.0
    else:
        r2 = float(min(1.0, max(0.0, fit.rvalue ** 2)))
    return FitResult(float(fit.slope), float(fit.intercept), r2, (int(lo), int(hi)))
