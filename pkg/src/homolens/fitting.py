"""Power-law fits on log-log scale with confidence intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass
class LogLogFit:
    slope: float
    intercept: float
    slope_se: float
    ci: tuple
    r2: float
    n_points: int
    level: float

    def contains(self, target, tol=0.0):
        return self.ci[0] - tol <= target <= self.ci[1] + tol

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "slope_se": self.slope_se,
                "ci": list(self.ci), "r2": self.r2, "n_points": self.n_points, "level": self.level}


def linear_fit(x, y, level=0.95, sigma=None):
    """Least-squares line y = a + b x; weighted by 1/sigma^2 when sigma is given.

    With sigma the slope stderr uses the supplied errors (no rescaling by the
    residual scatter); without it the usual OLS stderr with t quantiles.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    k = x.size
    if k < 2:
        raise ValueError("need at least two points")
    if sigma is None:
        res = stats.linregress(x, y)
        se = float(res.stderr) if k > 2 else math.nan
        q = stats.t.ppf(0.5 + level / 2, k - 2) if k > 2 else math.nan
        b, a, r2 = float(res.slope), float(res.intercept), float(res.rvalue**2)
    else:
        wts = 1.0 / np.asarray(sigma, dtype=float) ** 2
        W = wts.sum()
        xm = (wts * x).sum() / W
        ym = (wts * y).sum() / W
        sxx = (wts * (x - xm) ** 2).sum()
        b = float((wts * (x - xm) * (y - ym)).sum() / sxx)
        a = float(ym - b * xm)
        se = float(math.sqrt(1.0 / sxx))
        q = stats.norm.ppf(0.5 + level / 2)
        resid = y - a - b * x
        tot = (wts * (y - ym) ** 2).sum()
        r2 = float(1 - (wts * resid**2).sum() / tot) if tot > 0 else 1.0
    half = q * se
    return LogLogFit(b, a, se, (b - half, b + half), r2, int(k), float(level))


def loglog_fit(x, y, level=0.95, y_se=None):
    """Fit log y = a + b log x. y_se (standard errors of y) switches to WLS via the delta method."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive data")
    sigma = None if y_se is None else np.asarray(y_se, dtype=float) / y
    return linear_fit(np.log(x), np.log(y), level, sigma)


def log_grid(lo, hi, k):
    """k integer points spread geometrically over [lo, hi], duplicates removed."""
    return np.unique(np.round(np.geomspace(lo, hi, k)).astype(np.int64))
