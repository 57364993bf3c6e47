"""Small statistical helpers shared by the samplers, reports and tests."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats as sst


def binomial_z(counts, n, p):
    """Per-bucket z-scores of observed counts against success probabilities p."""
    counts = np.asarray(counts, dtype=float)
    p = np.asarray(p, dtype=float)
    sd = np.sqrt(n * p * (1 - p))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, (counts - n * p) / sd, np.where(counts == n * p, 0.0, np.inf))
    return z


def chi2_gof(counts, n, p, pool_below=5.0):
    """Chi-square goodness of fit for buckets 1..B plus a remainder bucket.

    ``counts`` and ``p`` cover buckets 1..B; the remainder absorbs n - sum(counts)
    against 1 - sum(p).  Buckets with expected count below ``pool_below`` are
    pooled into the remainder.  Returns (statistic, dof, p-value).
    """
    counts = np.asarray(counts, dtype=float)
    p = np.clip(np.asarray(p, dtype=float), 0.0, None)
    exp = n * p
    keep = exp >= pool_below
    obs_k, exp_k = counts[keep], exp[keep]
    rest_obs = n - obs_k.sum()
    rest_exp = n - exp_k.sum()
    obs = np.append(obs_k, rest_obs)
    ex = np.append(exp_k, rest_exp)
    if rest_exp < pool_below:
        obs, ex = obs[:-1], ex[:-1]
        if abs(rest_obs) > 0 and rest_exp <= 0:
            return math.inf, len(obs) - 1, 0.0
    stat = float(np.sum((obs - ex) ** 2 / ex))
    dof = len(obs) - 1
    return stat, dof, float(sst.chi2.sf(stat, dof))


def two_sample_chi2(c1, c2):
    """Homogeneity test of two count vectors over the same buckets."""
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    keep = (c1 + c2) > 0
    table = np.vstack([c1[keep], c2[keep]])
    if table.shape[1] < 2:
        return 0.0, 0, 1.0
    stat, pval, dof, _ = sst.chi2_contingency(table, correction=False)
    return float(stat), int(dof), float(pval)


def mean_ci(x, level=0.95):
    x = np.asarray(x, dtype=float)
    m = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf
    q = sst.norm.ppf(0.5 + level / 2)
    return m, se, (m - q * se), (m + q * se)


def proportion_ci(k, n, level=0.95):
    """Wilson interval for a binomial proportion."""
    if n == 0:
        return 0.0, 0.0, 1.0
    q = sst.norm.ppf(0.5 + level / 2)
    p = k / n
    den = 1 + q * q / n
    c = (p + q * q / (2 * n)) / den
    h = q * math.sqrt(p * (1 - p) / n + q * q / (4 * n * n)) / den
    # the limits are exactly 0 and 1 at the ends; keep them so under rounding
    lo = 0.0 if k == 0 else max(c - h, 0.0)
    hi = 1.0 if k == n else min(c + h, 1.0)
    return p, lo, hi
