"""Negative-binomial model for the daily count of first-time visitors.

``pmf(k) = C(k + r - 1, k) p^r (1 - p)^k``, i.e. the number of failures
before the ``r``-th success, with mean ``r (1 - p) / p``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln
from scipy.stats import chi2

from .errors import (
    DataFormatError,
    InsufficientDataError,
    NotOverdispersedError,
    ParameterDomainError,
)


@dataclass(frozen=True)
class NegBinomParams:
    r: int
    p: float

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 1:
            raise ParameterDomainError(f"r must be a positive integer, got {self.r}")
        if not 0 < self.p < 1:
            raise ParameterDomainError(f"p must lie in (0, 1), got {self.p}")
        object.__setattr__(self, "r", int(self.r))
        object.__setattr__(self, "p", float(self.p))

    @property
    def mean(self):
        return self.r * (1 - self.p) / self.p

    @property
    def var(self):
        return self.r * (1 - self.p) / self.p ** 2

    def to_json(self):
        return {"r": self.r, "p": self.p}

    @classmethod
    def from_json(cls, d):
        return cls(d["r"], d["p"])


def _logpmf(r, p, k):
    k = np.asarray(k, dtype=float)
    return (gammaln(k + r) - gammaln(k + 1) - gammaln(r)
            + r * np.log(p) + k * np.log1p(-p))


def negbinom_pmf(params: NegBinomParams, k):
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or np.any(np.floor(k_arr) != k_arr):
        raise ValueError("k must be a nonnegative integer")
    out = np.exp(_logpmf(params.r, params.p, k_arr))
    return float(out) if out.ndim == 0 else out


def fit_negbinom(daily_counts, r_max=50, min_obs=30):
    """Profile maximum likelihood over integer ``r`` in ``1..r_max``.

    For fixed ``r`` the likelihood is maximized by ``p = r / (r + mean)``.
    """
    k = np.asarray(daily_counts)
    if k.ndim != 1 or len(k) < min_obs:
        raise InsufficientDataError(f"need at least {min_obs} daily counts, got {k.size}")
    if np.any(k < 0) or np.any(np.floor(k) != k):
        raise ValueError("daily counts must be nonnegative integers")
    k = k.astype(float)
    mean, var = k.mean(), k.var(ddof=1)
    if not var > mean:
        raise NotOverdispersedError(
            f"sample variance {var:.4g} does not exceed the mean {mean:.4g}; "
            "a Poisson model is more appropriate")
    # sufficient statistics: histogram of counts
    values, freq = np.unique(k, return_counts=True)
    best = None
    for r in range(1, r_max + 1):
        p = r / (r + mean)
        ll = float(freq @ _logpmf(r, p, values))
        if best is None or ll > best[0]:
            best = (ll, r, p)
    return NegBinomParams(best[1], best[2])


def sample_initiations(params: NegBinomParams, rng: np.random.Generator, size=None):
    """Gamma-Poisson draws: ``lambda ~ Gamma(r, (1-p)/p)``, ``k ~ Poisson(lambda)``."""
    lam = rng.gamma(params.r, (1 - params.p) / params.p, size=size)
    out = rng.poisson(lam)
    return int(out) if size is None else out


@dataclass
class GofReport:
    statistic: float
    dof: int
    p_value: float
    bins: list = field(default_factory=list)

    def to_json(self):
        return {
            "statistic": self.statistic,
            "dof": self.dof,
            "p_value": self.p_value,
            "bins": [{"range": list(r), "observed": o, "expected": e} for r, o, e in self.bins],
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=2)


def merge_bins(observed, expected, min_expected=5.0):
    """Merge adjacent bins left to right until each expected count reaches the minimum.

    Returns ``(groups, O, E)`` where ``groups`` lists the original bin indices
    of each merged bin.  A short remainder is folded into the last bin.
    """
    groups, O, E = [], [], []
    cur, o, e = [], 0.0, 0.0
    for i, (oi, ei) in enumerate(zip(observed, expected)):
        cur.append(i)
        o += oi
        e += ei
        if e >= min_expected:
            groups.append(cur)
            O.append(o)
            E.append(e)
            cur, o, e = [], 0.0, 0.0
    if cur:
        if not groups:
            raise InsufficientDataError("total expected count is below the bin minimum")
        groups[-1] = groups[-1] + cur
        O[-1] += o
        E[-1] += e
    return groups, np.array(O), np.array(E)


def pearson_test(observed, expected, n_estimated=0):
    """Pearson statistic and upper-tail p-value for already-binned counts."""
    O = np.asarray(observed, dtype=float)
    E = np.asarray(expected, dtype=float)
    stat = float(np.sum((O - E) ** 2 / E))
    dof = len(O) - 1 - n_estimated
    if dof < 1:
        raise InsufficientDataError(f"{len(O)} bins leave no degrees of freedom")
    return stat, dof, float(chi2.sf(stat, dof))


def chi2_gof(observed_counts, params: NegBinomParams, n_estimated=2, min_expected=5.0):
    """Pearson goodness of fit of daily counts against a negative binomial.

    Bins are the integers ``0, 1, ...``; the last bin absorbs the whole
    upper tail so the expected counts sum to the sample size.
    """
    k = np.asarray(observed_counts).astype(np.int64)
    N = len(k)
    if N == 0:
        raise InsufficientDataError("no observations")
    top = int(k.max())
    support = np.arange(top + 1)
    probs = negbinom_pmf(params, support)
    probs[-1] = max(1.0 - probs[:-1].sum(), 0.0)
    obs = np.bincount(k, minlength=top + 1).astype(float)
    groups, O, E = merge_bins(obs, N * probs, min_expected)
    stat, dof, pval = pearson_test(O, E, n_estimated)
    bins = []
    for gi, g in enumerate(groups):
        hi = "inf" if gi == len(groups) - 1 else int(g[-1])
        bins.append(((int(g[0]), hi), float(O[gi]), float(E[gi])))
    return GofReport(stat, dof, pval, bins)


def read_daily_counts(path):
    """Read a ``date,count`` CSV and return the counts in file order."""
    counts = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["date", "count"]:
            raise DataFormatError(f"expected header date,count, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                c = int(row[1])
            except (IndexError, ValueError):
                raise DataFormatError(f"bad row {row}", line=lineno) from None
            if c < 0:
                raise DataFormatError("negative count", line=lineno)
            counts.append(c)
    return counts
