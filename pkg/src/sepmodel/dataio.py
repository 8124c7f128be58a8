"""Reading transaction and survey files, building gap data, and synthetic inputs.

Internal time is whole days counted from the first day of the study window.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .errors import DataFormatError, DomainError
from .initiation import NegBinomParams
from .likelihood import ClientFeatures, ObservationSet, RegressionCoefficients
from .phase_type import FitConfig

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# survey schema

BINARY = [
    "snort", "gallery",
    "src_other_locations", "src_other_sep", "src_family", "src_friends", "src_acquaintance",
    "src_strangers",
    "drug_speedball", "drug_heroin", "drug_cocaine", "drug_ritalin_heroin", "drug_other",
    "tx_current", "tx_been", "tx_tried", "tx_interested",
]
FAMILIES = {
    "gender": ["gender_male", "gender_female", "gender_transgender"],
    "ethnicity": ["eth_white", "eth_african_american", "eth_puerto_rican", "eth_mexican",
                  "eth_other_latino", "eth_other"],
}
CONTINUOUS = ["age", "age_first_injection", "injection_span", "injections_per_day",
              "reuse_own_30d", "use_behind_others_30d", "days_in_area_30d"]
PREDICTORS = BINARY + FAMILIES["gender"] + FAMILIES["ethnicity"] + CONTINUOUS
SURVEY_HEADER = ["client_id"] + PREDICTORS + ["zip"]
TRANSACTION_HEADER = ["client_id", "date", "location_id", "syringes", "group_size"]

# legal ranges of the continuous answers
RANGES = {
    "age": (18.0, 85.0),
    "age_first_injection": (8.0, 70.0),
    "injection_span": (0.0, 60.0),
    "injections_per_day": (0.0, 10.0),
    "reuse_own_30d": (0.0, 30.0),
    "use_behind_others_30d": (0.0, 30.0),
    "days_in_area_30d": (0.0, 30.0),
}

# population marginals: share answering yes, or (mean, sd)
MARGINALS = {
    "snort": 0.3446, "gallery": 0.0864,
    "src_family": 0.0586, "src_friends": 0.2529, "src_acquaintance": 0.0530,
    "src_strangers": 0.0163, "src_other_sep": 0.1360, "src_other_locations": 0.6131,
    "drug_speedball": 0.0486, "drug_heroin": 0.9582, "drug_cocaine": 0.0581,
    "drug_ritalin_heroin": 0.0005, "drug_other": 0.0185,
    "tx_current": 0.1011, "tx_been": 0.1870, "tx_tried": 0.0923, "tx_interested": 0.4738,
}
FAMILY_SHARES = {
    "gender": [0.6947, 0.3049, 0.0004],
    "ethnicity": [0.5158, 0.2345, 0.1478, 0.0617, 0.0122, 0.0280],
}
MOMENTS = {
    "age": (34.79, 11.22),
    "age_first_injection": (23.44, 7.86),
    "injection_span": (11.36, 11.36),
    "injections_per_day": (2.77, 1.87),
    "reuse_own_30d": (1.61, 6.15),
    "use_behind_others_30d": (0.34, 1.29),
    "days_in_area_30d": (23.88, 9.75),
}
# share with a nonzero answer for the zero-inflated counts
NONZERO_SHARE = {"reuse_own_30d": 0.1579, "use_behind_others_30d": 0.1972}


@dataclass(frozen=True)
class StudyWindow:
    start: dt.date
    open_days: int = 2310

    def __post_init__(self):
        if isinstance(self.start, str):
            object.__setattr__(self, "start", dt.date.fromisoformat(self.start))
        if self.open_days < 1:
            raise DomainError("window must span at least one day")

    @property
    def end(self):
        """First day after the window."""
        return self.start + dt.timedelta(days=self.open_days)

    @classmethod
    def between(cls, start, end):
        start = dt.date.fromisoformat(start) if isinstance(start, str) else start
        end = dt.date.fromisoformat(end) if isinstance(end, str) else end
        if not start < end:
            raise DomainError("window start must precede its end")
        return cls(start, (end - start).days)

    @classmethod
    def parse(cls, text):
        """``"YYYY-MM-DD:YYYY-MM-DD"`` (end exclusive)."""
        try:
            a, b = text.split(":")
            return cls.between(a, b)
        except ValueError as exc:
            raise DomainError(f"bad window {text!r}: expected START:END ISO dates") from exc

    def day(self, date):
        return (date - self.start).days

    def date(self, day):
        return self.start + dt.timedelta(days=int(day))


SYNTHETIC_WINDOW = StudyWindow(dt.date(2005, 7, 1), 2310)


@dataclass(frozen=True)
class TransactionRecord:
    client_id: str
    date: dt.date
    location_id: str
    syringes: int
    group_size: int

    def __post_init__(self):
        if self.syringes < 0 or self.group_size < 0:
            raise DomainError("syringe and group counts must be nonnegative")


@dataclass
class SurveyRecord:
    client_id: str
    values: dict
    zip: str

    def __post_init__(self):
        missing = [p for p in PREDICTORS if p not in self.values]
        if missing:
            raise DomainError(f"survey {self.client_id} lacks {missing}")
        for name in BINARY + FAMILIES["gender"] + FAMILIES["ethnicity"]:
            if self.values[name] not in (0, 1):
                raise DomainError(f"{name} must be 0 or 1, got {self.values[name]}")
        for fam, cols in FAMILIES.items():
            if sum(self.values[c] for c in cols) != 1:
                raise DomainError(f"survey {self.client_id}: exactly one {fam} level must be set")
        for name, (lo, hi) in RANGES.items():
            v = self.values[name]
            if not lo <= v <= hi:
                raise DomainError(f"{name}={v} outside [{lo}, {hi}]")

    @property
    def at_risk(self):
        return self.values["reuse_own_30d"] > 0 or self.values["use_behind_others_30d"] > 0

    def row(self):
        return [self.client_id] + [_fmt(self.values[p]) for p in PREDICTORS] + [self.zip]


def _fmt(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# ---------------------------------------------------------------------------
# reading


def read_surveys(path):
    records = {}
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SURVEY_HEADER:
            raise DataFormatError("surveys.csv header does not match the expected columns", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SURVEY_HEADER):
                raise DataFormatError(f"expected {len(SURVEY_HEADER)} fields, got {len(row)}", lineno)
            try:
                vals = {p: float(x) for p, x in zip(PREDICTORS, row[1:-1])}
                rec = SurveyRecord(row[0], vals, row[-1])
            except (ValueError, DomainError) as exc:
                raise DataFormatError(str(exc), lineno) from None
            if rec.client_id in records:
                raise DataFormatError(f"duplicate survey for client {rec.client_id}", lineno)
            records[rec.client_id] = rec
    return records


def read_transactions(path):
    out = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRANSACTION_HEADER:
            raise DataFormatError(f"transactions.csv header must be {','.join(TRANSACTION_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise DataFormatError(f"expected 5 fields, got {len(row)}", lineno)
            try:
                out.append(TransactionRecord(row[0], dt.date.fromisoformat(row[1]), row[2],
                                             int(row[3]), int(row[4])))
            except (ValueError, DomainError) as exc:
                raise DataFormatError(str(exc), lineno) from None
    return out


def write_surveys(path, records):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURVEY_HEADER)
        for r in records:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# standardization


def standardize_features(records, metadata=None):
    """Turn survey records into model features.

    Continuous answers are centred and scaled by the population mean and
    standard deviation; binary answers stay 0/1; each one-hot family loses
    its first (reference) level.  Passing the ``metadata`` returned by an
    earlier call applies the same transform to new clients.
    """
    records = list(records)
    if not records:
        raise DomainError("no survey records to standardize")
    if metadata is None:
        columns = [{"name": b, "kind": "indicator"} for b in BINARY]
        families = {}
        for fam, cols in FAMILIES.items():
            families[fam] = {"levels": cols, "reference": cols[0]}
            columns += [{"name": c, "kind": "indicator"} for c in cols[1:]]
        excluded = []
        for name in CONTINUOUS:
            v = np.array([r.values[name] for r in records], dtype=float)
            sd = float(v.std())
            if not sd > 0:
                warnings.warn(f"continuous column {name} has zero variance; excluded",
                              RuntimeWarning, stacklevel=2)
                excluded.append(name)
                continue
            columns.append({"name": name, "kind": "continuous", "mean": float(v.mean()), "sd": sd})
        metadata = {"columns": columns, "families": families, "excluded": excluded}
    X = np.empty((len(records), len(metadata["columns"])))
    for j, col in enumerate(metadata["columns"]):
        v = np.array([r.values[col["name"]] for r in records], dtype=float)
        if col["kind"] == "continuous":
            v = (v - col["mean"]) / col["sd"]
        X[:, j] = v
    feats = [ClientFeatures(X[i], r.client_id) for i, r in enumerate(records)]
    return feats, metadata


def feature_names(metadata):
    return [c["name"] for c in metadata["columns"]]


# ---------------------------------------------------------------------------
# merging


@dataclass
class MergeReport:
    rows_in: int = 0
    rows_used: int = 0
    dropped: Counter = field(default_factory=Counter)
    clients: int = 0
    metadata: dict | None = None

    def to_json(self):
        return {"rows_in": self.rows_in, "rows_used": self.rows_used,
                "dropped": dict(self.dropped), "clients": self.clients}


def build_observations(visits, window: StudyWindow, client_ids=None):
    """Gap data from ``{client_id: visit days}`` (days counted from window start).

    Consecutive distinct days give uncensored gaps; the distance from the
    last visit to the end of the window gives the censored gap.
    """
    ids = sorted(visits) if client_ids is None else list(client_ids)
    ts, vs, tu = [], [], []
    for v, cid in enumerate(ids):
        days = sorted(set(visits[cid]))
        ts.extend(np.diff(days).tolist())
        vs.extend([v] * (len(days) - 1))
        tu.append(window.open_days - days[-1])
    return ObservationSet(np.array(ts, dtype=float), np.array(vs, dtype=np.int64),
                          np.array(tu, dtype=float), np.arange(len(ids)), client_ids=ids)


def load_and_merge(transactions, surveys, window: StudyWindow, metadata=None, return_report=False):
    """Merge transactions with surveys into features and gap observations.

    Transactions of clients without a survey, outside the window, or
    repeating a client's visit on the same day are dropped and counted.
    Clients are ordered by client id.  With ``return_report=True`` a third
    value, a :class:`MergeReport` holding the scaling metadata, is returned.
    """
    tx = read_transactions(transactions) if not isinstance(transactions, list) else transactions
    sv = read_surveys(surveys) if not isinstance(surveys, dict) else surveys
    rep = MergeReport(rows_in=len(tx))
    visits = {}
    for r in tx:
        if r.client_id not in sv:
            rep.dropped["no_survey"] += 1
            continue
        d = window.day(r.date)
        if not 0 <= d < window.open_days:
            rep.dropped["outside_window"] += 1
            continue
        days = visits.setdefault(r.client_id, set())
        if d in days:
            rep.dropped["same_day_duplicate"] += 1
            continue
        days.add(d)
        rep.rows_used += 1
    for reason, n in rep.dropped.items():
        log.info("dropped %d transaction rows: %s", n, reason)
    if not visits:
        raise DataFormatError("no usable transactions")
    obs = build_observations({k: sorted(v) for k, v in visits.items()}, window)
    feats, meta = standardize_features([sv[c] for c in obs.client_ids], metadata)
    rep.clients = obs.n_clients
    rep.metadata = meta
    if return_report:
        return feats, obs, rep
    return feats, obs


# ---------------------------------------------------------------------------
# synthetic population


def _trunc_lognormal_moments(mu, sigma, lo, hi):
    a = (np.log(lo) - mu) / sigma if lo > 0 else -np.inf
    b = (np.log(hi) - mu) / sigma
    Z = stats.norm.cdf(b) - stats.norm.cdf(a)
    m = []
    for k in (1, 2):
        num = stats.norm.cdf(b - k * sigma) - stats.norm.cdf(a - k * sigma)
        m.append(np.exp(k * mu + 0.5 * k * k * sigma * sigma) * num / Z)
    return m[0], m[1] - m[0] ** 2


def fit_truncated_lognormal(mean, sd, lo, hi):
    """``(mu, sigma, worst relative moment error)`` of a lognormal truncated to ``[lo, hi]``."""

    def resid(z):
        mu, ls = z
        with np.errstate(over="ignore", invalid="ignore"):
            m, v = _trunc_lognormal_moments(mu, np.exp(ls), lo, hi)
        r = [(m - mean) / mean, (np.sqrt(max(v, 0.0)) - sd) / sd]
        return r if np.all(np.isfinite(r)) else [1e3, 1e3]

    s2 = np.log1p((sd / mean) ** 2)
    z0 = [np.log(mean) - s2 / 2, 0.5 * np.log(s2)]
    sol = optimize.least_squares(resid, z0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return float(sol.x[0]), float(np.exp(sol.x[1])), float(np.max(np.abs(sol.fun)))


def sample_truncated_lognormal(mu, sigma, lo, hi, rng, size):
    a = stats.norm.cdf((np.log(lo) - mu) / sigma) if lo > 0 else 0.0
    b = stats.norm.cdf((np.log(hi) - mu) / sigma)
    u = a + (b - a) * rng.random(size)
    return np.clip(np.exp(mu + sigma * stats.norm.ppf(u)), lo, hi)


_CONT_PARAMS = {}


def continuous_law(name):
    """Sampling law of a continuous field, solved once and cached.

    Returns ``("lognormal", mu, sigma, lo, hi)`` when a truncated lognormal
    hits the target moments, else ``("beta", a, b, lo, hi)``: a beta law
    rescaled to the legal range, which matches any feasible bounded moments.
    For the zero-inflated counts the moments are those of the nonzero part.
    """
    if name not in _CONT_PARAMS:
        mean, sd = MOMENTS[name]
        lo, hi = RANGES[name]
        if name in NONZERO_SHARE:
            pi = NONZERO_SHARE[name]
            m1 = mean / pi
            sd = float(np.sqrt((sd ** 2 + mean ** 2) / pi - m1 ** 2))
            mean = m1
        mu, sigma, err = fit_truncated_lognormal(mean, sd, lo, hi)
        if err < 1e-6:
            _CONT_PARAMS[name] = ("lognormal", mu, sigma, lo, hi)
        else:
            m = (mean - lo) / (hi - lo)
            v = (sd / (hi - lo)) ** 2
            if not v < m * (1 - m):
                raise DomainError(f"moments of {name} are infeasible on [{lo}, {hi}]")
            k = m * (1 - m) / v - 1
            _CONT_PARAMS[name] = ("beta", m * k, (1 - m) * k, lo, hi)
    return _CONT_PARAMS[name]


def sample_continuous(name, rng, size):
    law = continuous_law(name)
    lo, hi = law[3], law[4]
    if law[0] == "lognormal":
        return sample_truncated_lognormal(law[1], law[2], lo, hi, rng, size)
    return lo + (hi - lo) * rng.beta(law[1], law[2], size)


def generate_synthetic_population(count, seed=0, zip_codes=None):
    """Survey records drawn field by field from the population marginals.

    Categorical answers follow their published shares.  Continuous answers
    follow :func:`continuous_law`, so their mean and standard deviation hit
    the targets; the two syringe-reuse counts are zero with the published
    "no" share.
    Fields are independent of each other.
    """
    if count < 1:
        raise DomainError("count must be at least 1")
    rng = np.random.default_rng(seed)
    zips = list(zip_codes) if zip_codes is not None else [str(60601 + i) for i in range(50)]
    cols = {}
    for name in BINARY:
        cols[name] = (rng.random(count) < MARGINALS[name]).astype(int)
    for fam, levels in FAMILIES.items():
        pick = rng.choice(len(levels), size=count, p=np.array(FAMILY_SHARES[fam]) / sum(FAMILY_SHARES[fam]))
        for i, lev in enumerate(levels):
            cols[lev] = (pick == i).astype(int)
    for name in CONTINUOUS:
        x = sample_continuous(name, rng, count)
        if name in NONZERO_SHARE:
            # keep the nonzero part nonzero after rounding to 4 places
            x = np.where(rng.random(count) < NONZERO_SHARE[name], np.maximum(x, 1e-4), 0.0)
        cols[name] = np.round(x, 4)
    zip_pick = rng.integers(0, len(zips), count)
    width = len(str(count))
    out = []
    for i in range(count):
        vals = {p: (int(cols[p][i]) if p not in CONTINUOUS else float(cols[p][i])) for p in PREDICTORS}
        out.append(SurveyRecord(f"P{i:0{width}d}", vals, zips[zip_pick[i]]))
    return out


# ---------------------------------------------------------------------------
# synthetic visits


@dataclass
class GeneratedData:
    transactions_csv: str
    surveys_csv: str
    ground_truth: dict
    observations: ObservationSet


def generate_synthetic_visits(population, true_coeffs: RegressionCoefficients,
                              negbinom: NegBinomParams, window: StudyWindow = SYNTHETIC_WINDOW,
                              seed=0, warmup_days=5000, config: FitConfig = FitConfig()):
    """Simulate visits of clients resampled from ``population``.

    Client parameters come from ``true_coeffs`` applied to the standardized
    population.  Returns the transaction and survey files as text, the
    ground truth, and the gap data an observer of the window would record;
    re-ingesting the files reproduces those gaps exactly.
    """
    from .simulate import ClientModel, SimConfig, run_lifecycle_sim

    population = list(population)
    feats, meta = standardize_features(population)
    X = np.vstack([f.x for f in feats])
    if X.shape[1] != true_coeffs.m:
        raise DomainError(f"coefficients expect {true_coeffs.m} features, population has {X.shape[1]}")
    model = ClientModel.from_coefficients(true_coeffs, X, config)
    sim_cfg = SimConfig(warmup_days=warmup_days, horizon_days=window.open_days, seed=seed,
                        replications=1)
    out = run_lifecycle_sim(model, negbinom, sim_cfg, 0)
    width = max(6, len(str(len(out.client_pop))))
    name = lambda c: f"C{c:0{width}d}"
    # transaction details come from their own stream so they never disturb the visits
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0, 3])))
    n = len(out.arrival_day)
    loc = rng.integers(1, 7, n)
    syr = rng.poisson(20.0, n)
    grp = 1 + rng.poisson(0.3, n)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSACTION_HEADER)
    dates = {}
    for i in range(n):
        d = int(out.arrival_day[i])
        if d not in dates:
            dates[d] = window.date(d).isoformat()
        w.writerow([name(out.arrival_client[i]), dates[d], f"L{loc[i]}", int(syr[i]), int(grp[i])])
    seen = out.window_clients
    sbuf = io.StringIO()
    sw = csv.writer(sbuf, lineterminator="\n")
    sw.writerow(SURVEY_HEADER)
    for c in seen:
        src = population[out.client_pop[c]]
        sw.writerow(SurveyRecord(name(c), dict(src.values), src.zip).row())
    obs = out.observation_set()
    obs.client_ids = [name(int(c)) for c in obs.client_ids]
    truth = {
        "coefficients": true_coeffs.to_json(),
        "negbinom": negbinom.to_json(),
        "window": {"start": window.start.isoformat(), "open_days": window.open_days},
        "seed": seed,
        "warmup_days": warmup_days,
        "population_metadata": meta,
        "n_clients": int(len(seen)),
        "n_transactions": int(n),
        "n_gaps": int(len(out.gaps)),
    }
    return GeneratedData(buf.getvalue(), sbuf.getvalue(), truth, obs)


def save_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
