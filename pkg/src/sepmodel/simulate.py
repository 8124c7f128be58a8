"""Discrete-event simulation of client lifecycles.

New clients arrive each day in negative-binomial numbers.  At every visit a
client leaves for good with probability ``p``; otherwise its next visit is
scheduled after a Coxian gap.  Gap times stay continuous; the day of a visit
is ``floor(time)``.  Days run from ``-warmup_days`` to ``horizon_days - 1``
and statistics use days ``>= 0`` only.

Randomness is split into independent streams so that changing one part of
the model does not reshuffle the rest (common random numbers):

* one stream for initiation counts and population draws,
* one stream per client for its visits (exit, branch, eligibility, phase
  durations), consumed one row per visit.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chi2, norm

from .errors import InsufficientDataError
from .initiation import GofReport, NegBinomParams, merge_bins, sample_initiations
from .likelihood import ObservationSet, feature_matrix, predict_arrays
from .phase_type import CoxianParams, FitConfig, coxian_sample

_NEVER = -(10 ** 9)
_BLOCK = 8


@dataclass(frozen=True)
class SimConfig:
    warmup_days: int = 5000
    horizon_days: int = 2310
    seed: int = 0
    replications: int = 20
    population: str = "synthetic"

    def __post_init__(self):
        if self.warmup_days < 0:
            raise ValueError("warmup_days must be nonnegative")
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be at least 1")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.population not in ("synthetic", "empirical"):
            raise ValueError("population must be 'synthetic' or 'empirical'")


class ClientModel:
    """Per-client parameters for each row of a population table.

    New clients are drawn by resampling rows uniformly with replacement.
    """

    def __init__(self, beta, gamma, p, labels=None):
        self.beta = np.atleast_2d(np.asarray(beta, dtype=float))
        self.gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        self.p = np.atleast_1d(np.asarray(p, dtype=float))
        P = len(self.p)
        if self.beta.shape[0] != P or self.gamma.shape[0] != P:
            raise ValueError("beta, gamma and p must have one row per population member")
        if np.any((self.p < 0) | (self.p > 1)):
            raise ValueError("exit probabilities must lie in [0, 1]")
        self.labels = None if labels is None else np.asarray(labels)

    def __len__(self):
        return len(self.p)

    @property
    def n(self):
        return self.beta.shape[1]

    @classmethod
    def fixed(cls, params: CoxianParams):
        if params.exit_p is None:
            raise ValueError("fixed model needs an exit probability")
        return cls(params.beta[None, :], params.gamma[None, :], [params.exit_p])

    @classmethod
    def from_coefficients(cls, coeffs, features, config: FitConfig = FitConfig(), labels=None):
        X = feature_matrix(features)
        beta, gamma, p = predict_arrays(coeffs, X, config)
        return cls(beta, gamma, p, labels)

    def params(self, i):
        return CoxianParams(self.beta[i], self.gamma[i], float(self.p[i]))


@dataclass
class SimOutput:
    """Post-warm-up results of one replication.

    ``client_*`` arrays are indexed by client serial (order of initiation,
    warm-up clients included).  ``client_first_day`` is ``-1`` for clients
    without a visit in the window.  Gaps are between distinct visit days.
    """

    horizon_days: int
    arrival_day: np.ndarray
    arrival_client: np.ndarray
    daily_arrivals: np.ndarray
    client_pop: np.ndarray
    client_init_day: np.ndarray
    client_first_day: np.ndarray
    client_last_day: np.ndarray
    client_visits: np.ndarray
    client_exited: np.ndarray
    gaps: np.ndarray
    gap_client: np.ndarray
    total_interventions: int = 0
    risky_interventions: int = 0
    notifications: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def avg_daily_arrivals(self):
        return float(self.daily_arrivals.mean())

    @property
    def window_clients(self):
        return np.flatnonzero(self.client_first_day >= 0)

    @property
    def sojourns(self):
        """Last minus first in-window visit day for every client seen in the window."""
        c = self.window_clients
        return self.client_last_day[c] - self.client_first_day[c]

    @property
    def sojourn_censored(self):
        """True where the client had not exited by the end of the window."""
        return ~self.client_exited[self.window_clients]

    def observation_set(self):
        """The gaps an observer of the window would record, keyed by client serial."""
        c = self.window_clients
        index = np.full(len(self.client_first_day), -1)
        index[c] = np.arange(len(c))
        return ObservationSet(self.gaps.astype(float), index[self.gap_client],
                              (self.horizon_days - self.client_last_day[c]).astype(float),
                              np.arange(len(c)), client_ids=[str(i) for i in c])

    def write_csvs(self, directory, bin_width=1):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write(directory / "arrivals.csv", ["day", "client_id"],
               zip(self.arrival_day.tolist(), self.arrival_client.tolist()))
        _write(directory / "gaps.csv", ["client_id", "gap_days"],
               zip(self.gap_client.tolist(), self.gaps.tolist()))
        c = self.window_clients
        _write(directory / "sojourns.csv", ["client_id", "first_day", "last_day", "sojourn_days",
                                            "censored"],
               zip(c.tolist(), self.client_first_day[c].tolist(), self.client_last_day[c].tolist(),
                   self.sojourns.tolist(), self.sojourn_censored.astype(int).tolist()))
        if len(self.gaps):
            _write(directory / "loglog.csv", ["log10_gap", "log10_frequency"],
                   loglog_table(self.gaps, bin_width).tolist())


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class _Lifecycle:
    """Mutable state of one replication; a policy may inspect and poke it."""

    def __init__(self, model: ClientModel, negbinom: NegBinomParams, config: SimConfig, replication):
        self.model = model
        self.negbinom = negbinom
        self.config = config
        self.rep = replication
        self.n = model.n
        self.init_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([config.seed, replication, 0])))
        self.cumbeta = np.cumsum(model.beta, axis=1).tolist()
        self.gamma = model.gamma.tolist()
        self.p = model.p.tolist()
        self.heap = []
        self.seq = 0
        H = config.horizon_days
        self.daily = np.zeros(H, dtype=np.int64)
        self.arr_day, self.arr_client = [], []
        self.gaps, self.gap_client = [], []
        cap = 1024
        self.size = 0
        self.last_time = np.full(cap, -np.inf)
        self.exited = np.zeros(cap, dtype=bool)
        self.eligible = np.zeros(cap, dtype=bool)
        self.passive_until = np.full(cap, -np.inf)
        self.pop, self.init_day, self.token = [], [], []
        self.first_day, self.last_day, self.visits = [], [], []
        self.rngs, self.buf, self.ptr = [], [], []
        self.p_r = 0.0

    # client bookkeeping --------------------------------------------------
    def _grow(self):
        cap = 2 * len(self.last_time)
        for name, fill in (("last_time", -np.inf), ("exited", False), ("eligible", False),
                           ("passive_until", -np.inf)):
            old = getattr(self, name)
            new = np.full(cap, fill, dtype=old.dtype)
            new[: len(old)] = old
            setattr(self, name, new)

    def new_client(self, pop_index, day):
        c = self.size
        if c == len(self.last_time):
            self._grow()
        self.size += 1
        self.pop.append(pop_index)
        self.init_day.append(day)
        self.token.append(0)
        self.first_day.append(-1)
        self.last_day.append(_NEVER)
        self.visits.append(0)
        self.rngs.append(np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([self.config.seed, self.rep, 1, c]))))
        self.buf.append(None)
        self.ptr.append(_BLOCK)
        return c

    def _draw(self, c):
        """Next row of ``[u_exit, u_branch, u_eligible, e_1..e_n]`` for client ``c``."""
        if self.ptr[c] == _BLOCK:
            u = self.rngs[c].random((_BLOCK, 3 + self.n))
            u[:, 3:] = -np.log1p(-u[:, 3:])
            self.buf[c] = u.tolist()
            self.ptr[c] = 0
        row = self.buf[c][self.ptr[c]]
        self.ptr[c] += 1
        return row

    # the visit itself ------------------------------------------------------
    def visit(self, c, t):
        day = math.floor(t)
        if day >= 0:
            self.daily[day] += 1
            self.arr_day.append(day)
            self.arr_client.append(c)
            prev = self.last_day[c]
            if prev != day:
                if prev >= 0:
                    self.gaps.append(day - prev)
                    self.gap_client.append(c)
                else:
                    self.first_day[c] = day
                self.last_day[c] = day
                self.visits[c] += 1
        self.last_time[c] = t
        row = self._draw(c)
        k = self.pop[c]
        if row[0] < self.p[k]:
            self.exited[c] = True
            self.eligible[c] = row[2] < self.p_r
            self.passive_until[c] = -np.inf
            self.token[c] += 1
            return
        self.exited[c] = False
        cb = self.cumbeta[k]
        branch = 0
        while branch < self.n - 1 and row[1] >= cb[branch]:
            branch += 1
        g = self.gamma[k]
        # phases branch+1 .. 2 come first (passive), phase 1 last (active)
        passive = 0.0
        for i in range(1, branch + 1):
            passive += row[3 + i] / g[i]
        gap = passive + row[3] / g[0]
        self.passive_until[c] = t + passive if branch > 0 else -np.inf
        self.token[c] += 1
        self.seq += 1
        heapq.heappush(self.heap, (t + gap, self.seq, c, self.token[c]))

    def run(self, policy=None):
        cfg = self.config
        P = len(self.model)
        for d in range(-cfg.warmup_days, cfg.horizon_days):
            if policy is not None and d >= 0:
                policy.daily(d, self)
            k = sample_initiations(self.negbinom, self.init_rng)
            if k:
                picks = self.init_rng.integers(0, P, size=k) if P > 1 else [0] * k
                for i in range(k):
                    c = self.new_client(int(picks[i]), d)
                    if policy is not None:
                        policy.on_new_client(c, int(picks[i]), self)
                    self.visit(c, float(d))
            end = d + 1
            heap = self.heap
            while heap and heap[0][0] < end:
                t, _, c, tok = heapq.heappop(heap)
                if tok == self.token[c]:
                    self.visit(c, t)
        return self.output(policy)

    def output(self, policy=None):
        n = self.size
        last = np.array(self.last_day, dtype=np.int64)
        out = SimOutput(
            horizon_days=self.config.horizon_days,
            arrival_day=np.array(self.arr_day, dtype=np.int64),
            arrival_client=np.array(self.arr_client, dtype=np.int64),
            daily_arrivals=self.daily,
            client_pop=np.array(self.pop, dtype=np.int64),
            client_init_day=np.array(self.init_day, dtype=np.int64),
            client_first_day=np.array(self.first_day, dtype=np.int64),
            client_last_day=np.where(last == _NEVER, -1, last),
            client_visits=np.array(self.visits, dtype=np.int64),
            client_exited=self.exited[:n].copy(),
            gaps=np.array(self.gaps, dtype=np.int64),
            gap_client=np.array(self.gap_client, dtype=np.int64),
        )
        if policy is not None:
            policy.finish(out, self)
        return out


def run_lifecycle_sim(model, negbinom: NegBinomParams, config: SimConfig = SimConfig(),
                      replication=0, policy=None):
    """Simulate one replication.

    ``model`` is a :class:`ClientModel` or a :class:`CoxianParams` with an
    exit probability (every client identical).  ``policy`` is an optional
    object with ``daily``, ``on_new_client`` and ``finish`` hooks, used by
    the intervention layer.
    """
    if isinstance(model, CoxianParams):
        model = ClientModel.fixed(model)
    sim = _Lifecycle(model, negbinom, config, replication)
    if policy is not None:
        policy.attach(sim)
    return sim.run(policy)


def _rep_job(args):
    model, negbinom, config, r = args
    return run_lifecycle_sim(model, negbinom, config, r)


def run_replications(model, negbinom, config: SimConfig = SimConfig(), n_jobs=1):
    """All ``config.replications`` replications, in replication order."""
    jobs = [(model, negbinom, config, r) for r in range(config.replications)]
    if n_jobs == 1:
        return [_rep_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(_rep_job, jobs))


def mean_ci(values, level=0.95):
    """Mean and normal-approximation confidence half-width across replications."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return float(v.mean()), float("nan")
    half = norm.ppf(0.5 + level / 2) * v.std(ddof=1) / np.sqrt(len(v))
    return float(v.mean()), float(half)


# ---------------------------------------------------------------------------
# synthetic observation sets for fitting


def sample_observations(model, starts, end, rng: np.random.Generator, clients=None):
    """Continuous-time gap histories observed over ``[start_v, end)``.

    Client ``v`` first visits at ``starts[v]``, then follows the lifecycle
    (exit with ``p`` at each visit, otherwise a Coxian gap).  The last gap is
    right-censored at ``end`` whether or not the client has exited.
    ``clients`` maps each client to a population row (defaults to ``v``).
    """
    if isinstance(model, CoxianParams):
        model = ClientModel.fixed(model)
    starts = np.asarray(starts, dtype=float)
    V = len(starts)
    rows = np.zeros(V, dtype=np.int64) if len(model) == 1 and clients is None else (
        np.arange(V) if clients is None else np.asarray(clients))
    ts, vs, tu = [], [], np.empty(V)
    for v in range(V):
        k = rows[v]
        params = model.params(k)
        t = starts[v]
        while True:
            if rng.random() < model.p[k]:
                break
            gap = coxian_sample(params, rng)
            if t + gap >= end:
                break
            ts.append(gap)
            vs.append(v)
            t += gap
        tu[v] = end - t
    return ObservationSet(np.array(ts), np.array(vs, dtype=np.int64), tu, np.arange(V),
                          n_clients=V)


# ---------------------------------------------------------------------------
# validation statistics


def histogram_bins(gaps, bin_width=1.0):
    """Nonzero bins ``[i w, (i+1) w)``: returns ``(index, center, count)`` arrays."""
    g = np.asarray(gaps, dtype=float)
    if g.size == 0:
        raise InsufficientDataError("empty gap multiset")
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    idx = np.floor(g / bin_width).astype(np.int64)
    uniq, counts = np.unique(idx, return_counts=True)
    return uniq, (uniq + 0.5) * bin_width, counts


def loglog_table(gaps, bin_width=1.0):
    """``(log10 bin center, log10 frequency)`` rows of the gap histogram.

    Empty bins are left out.
    """
    _, centers, counts = histogram_bins(gaps, bin_width)
    return np.column_stack((np.log10(centers), np.log10(counts)))


def chi2_compare(simulated, observed, n_bins=20, min_expected=5.0):
    """Pearson homogeneity test of two samples on shared bins.

    Bin edges are quantiles of the pooled sample; adjacent bins are merged
    until every expected cell count in the 2 x K table reaches
    ``min_expected``.  Identical samples give a statistic of 0.
    """
    a = np.asarray(simulated, dtype=float)
    b = np.asarray(observed, dtype=float)
    if a.size == 0 or b.size == 0:
        raise InsufficientDataError("both samples must be nonempty")
    pooled = np.concatenate((a, b))
    edges = np.unique(np.quantile(pooled, np.linspace(0, 1, n_bins + 1)[1:-1]))
    ca = np.bincount(np.searchsorted(edges, a, side="right"), minlength=len(edges) + 1)
    cb = np.bincount(np.searchsorted(edges, b, side="right"), minlength=len(edges) + 1)
    share_a = a.size / pooled.size
    col = ca + cb
    # merge on the smaller of the two expected rows
    e_min = col * min(share_a, 1 - share_a)
    groups, _, _ = merge_bins(col, e_min, min_expected)
    Oa = np.array([ca[g].sum() for g in groups], dtype=float)
    Ob = np.array([cb[g].sum() for g in groups], dtype=float)
    cols = Oa + Ob
    Ea, Eb = cols * share_a, cols * (1 - share_a)
    if len(groups) < 2:
        raise InsufficientDataError("too few observations to form two bins")
    stat = float(np.sum((Oa - Ea) ** 2 / Ea) + np.sum((Ob - Eb) ** 2 / Eb))
    dof = len(groups) - 1
    pval = float(chi2.sf(stat, dof))
    lo = np.concatenate(([-np.inf], edges))
    hi = np.concatenate((edges, [np.inf]))
    bins = [((float(lo[g[0]]), float(hi[g[-1]])), float(Ob[i]), float(Eb[i]))
            for i, g in enumerate(groups)]
    return GofReport(stat, dof, pval, bins)


def group_share_table(out: SimOutput, labels):
    """Per group: share of window initiations and share of window visits.

    ``labels`` gives one group label per population row.  Initiations are
    clients whose first visit falls in the window.
    """
    labels = np.asarray(labels)
    client_group = labels[out.client_pop]
    new = out.client_init_day >= 0
    n_new = int(new.sum())
    visits_group = client_group[out.arrival_client]
    n_vis = len(out.arrival_client)
    rows = {}
    for grp in np.unique(labels):
        init = (client_group[new] == grp).sum() / n_new if n_new else float("nan")
        arr = (visits_group == grp).sum() / n_vis if n_vis else float("nan")
        rows[grp.item() if hasattr(grp, "item") else grp] = (float(init), float(arr))
    return rows


def write_shares(path, table):
    _write(path, ["group", "initiation_share", "arrival_share"],
           [(g, i, a) for g, (i, a) in table.items()])
