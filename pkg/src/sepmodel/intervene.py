"""Outreach-van policy layered on the lifecycle simulation.

A van parks at one of ``k`` sites each weekday, cycling through them.  A
client is notified when the time since their last visit exceeds their
notification threshold and their home area lies within the coverage radius
of the day's site.  With probability ``p_s`` a reachable client comes to the
van that day, which counts as an ordinary visit.  Reachable means still in
the system or exited but eligible to return (decided by a ``p_r`` coin at
each exit).  Every other notification counts as ignored; after
``max_ignored`` of those a client is never notified again.
"""

from __future__ import annotations

import csv
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError
from .likelihood import ObservationSet
from .phase_type import CoxianParams
from .simulate import ClientModel, SimConfig, mean_ci, run_lifecycle_sim

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InterventionConfig:
    p_s: float = 0.05
    p_r: float = 0.24
    notify_quantile: float = 0.9
    max_ignored: int = 3
    van_sites: tuple = ()
    k_sites: int = 5
    coverage_radius: float = 5.0
    start_weekday: int = 0

    def __post_init__(self):
        for name in ("p_s", "p_r"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0 < self.notify_quantile < 1:
            raise ValueError("notify_quantile must lie in (0, 1)")
        if self.max_ignored < 1:
            raise ValueError("max_ignored must be at least 1")
        if self.k_sites < 1:
            raise ValueError("k_sites must be at least 1")
        if self.coverage_radius <= 0:
            raise ValueError("coverage_radius must be positive")
        if not 0 <= self.start_weekday < 7:
            raise ValueError("start_weekday must be 0 (Monday) .. 6 (Sunday)")
        object.__setattr__(self, "van_sites", tuple(self.van_sites))


@dataclass(frozen=True)
class GeoClient:
    client_id: object
    area_code: str
    coordinates: tuple
    at_risk: bool


@dataclass
class Geography:
    """Area codes with planar coordinates (miles) and their distance matrix."""

    codes: list
    coords: np.ndarray
    dist: np.ndarray = None

    def __post_init__(self):
        self.codes = [str(c) for c in self.codes]
        self.coords = np.asarray(self.coords, dtype=float).reshape(len(self.codes), 2)
        if self.dist is None:
            diff = self.coords[:, None, :] - self.coords[None, :, :]
            self.dist = np.sqrt((diff ** 2).sum(axis=-1))
        self.index = {c: i for i, c in enumerate(self.codes)}
        if len(self.index) != len(self.codes):
            raise ValueError("duplicate area codes")

    @classmethod
    def synthetic(cls, n_areas=50, seed=0, extent=30.0, first_code=60601):
        """Area centroids scattered uniformly over an ``extent`` x ``extent`` square."""
        rng = np.random.default_rng(seed)
        codes = [str(first_code + i) for i in range(n_areas)]
        return cls(codes, rng.uniform(0, extent, (n_areas, 2)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["area_code", "x", "y"])
            for c, (x, y) in zip(self.codes, self.coords):
                w.writerow([c, repr(float(x)), repr(float(y))])

    @classmethod
    def from_csv(cls, path):
        codes, xy = [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                codes.append(row["area_code"])
                xy.append((float(row["x"]), float(row["y"])))
        return cls(codes, xy)


@dataclass
class InterventionOutput:
    avg_daily_arrivals: float
    arrivals_ci: float
    total_interventions: float
    total_ci: float
    risky_interventions: float
    risky_ci: float
    sites: list
    replicate_arrivals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    replicate_total: np.ndarray = field(default_factory=lambda: np.zeros(0))
    replicate_risky: np.ndarray = field(default_factory=lambda: np.zeros(0))
    replicate_notifications: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------------------
# thresholds and p_r


def notification_threshold(params, quantile=0.9):
    """Quantile of the fast-phase exponential return time, ``-ln(1-q)/gamma_1``."""
    g1 = params.gamma[0] if isinstance(params, CoxianParams) else float(params)
    if not g1 > 0:
        raise ValueError("fast rate must be positive")
    return float(-np.log1p(-quantile) / g1)


def threshold_histogram(gamma1, quantile=0.9, bin_width=5.0):
    """Histogram rows ``(bin_low, bin_high, count)`` of client thresholds."""
    thr = -np.log1p(-quantile) / np.asarray(gamma1, dtype=float)
    top = np.ceil(thr.max() / bin_width) * bin_width if thr.size else bin_width
    edges = np.arange(0.0, top + bin_width, bin_width)
    counts, edges = np.histogram(thr, bins=edges)
    return [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


def estimate_pr(obs: ObservationSet, threshold_days=552.0):
    """Share of long absences that ended in a return.

    ``N_r`` counts uncensored gaps above the threshold and ``N_e`` censored
    gaps above it; the estimate is ``N_r / (N_r + N_e)``.  With
    ``threshold_days=None`` the 0.975 quantile of the uncensored gaps is used.
    """
    if len(obs) == 0:
        raise InsufficientDataError("empty observation set")
    if threshold_days is None:
        if len(obs.uncensored_t) == 0:
            raise InsufficientDataError("no uncensored gaps to take a quantile of")
        threshold_days = float(np.quantile(obs.uncensored_t, 0.975))
    n_r = int(np.sum(obs.uncensored_t > threshold_days))
    n_e = int(np.sum(obs.censored_t > threshold_days))
    if n_r + n_e == 0:
        raise InsufficientDataError(f"no gap exceeds {threshold_days} days")
    return n_r / (n_r + n_e)


# ---------------------------------------------------------------------------
# site selection


def _coverage_sets(clients, radius, geography=None):
    at_risk = [c for c in clients if c.at_risk]
    if geography is not None:
        sites = sorted(geography.codes)
        site_xy = {s: geography.coords[geography.index[s]] for s in sites}
    else:
        site_xy = {}
        for c in clients:
            site_xy.setdefault(c.area_code, np.asarray(c.coordinates, dtype=float))
        sites = sorted(site_xy)
    xy = np.array([c.coordinates for c in at_risk], dtype=float).reshape(-1, 2)
    cover = {}
    for s in sites:
        d = np.sqrt(((xy - site_xy[s]) ** 2).sum(axis=1))
        cover[s] = frozenset(np.flatnonzero(d <= radius).tolist())
    return sites, cover, len(at_risk)


def select_van_sites(clients, k, radius, geography=None):
    """Greedy maximum coverage of at-risk clients.

    Candidate sites are the clients' area codes (or every area of
    ``geography``).  Each round takes the site covering the most at-risk
    clients not yet covered, ties going to the smallest area code; rounds
    stop early once nothing new can be covered.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    sites, cover, n_risk = _coverage_sets(clients, radius, geography)
    if n_risk == 0:
        warnings.warn("no at-risk clients; no van sites selected", RuntimeWarning, stacklevel=2)
        return []
    chosen, covered = [], set()
    for _ in range(k):
        best, gain = None, 0
        for s in sites:
            if s in chosen:
                continue
            g = len(cover[s] - covered)
            if g > gain:
                best, gain = s, g
        if best is None:
            break
        chosen.append(best)
        covered |= cover[best]
    return chosen


def coverage_count(clients, sites, radius, geography=None):
    _, cover, _ = _coverage_sets(clients, radius, geography)
    covered = set()
    for s in sites:
        covered |= cover[s]
    return len(covered)


def best_coverage(clients, k, radius, geography=None):
    """Exhaustive search over all ``k``-subsets; for small instances only."""
    sites, cover, _ = _coverage_sets(clients, radius, geography)
    best = (-1, None)
    for combo in itertools.combinations(sites, min(k, len(sites))):
        n = len(frozenset().union(*(cover[s] for s in combo)))
        if n > best[0]:
            best = (n, list(combo))
    return best


# ---------------------------------------------------------------------------
# the policy


class VanPolicy:
    """Hooks called by the lifecycle simulation (see :func:`run_lifecycle_sim`)."""

    def __init__(self, model: ClientModel, area_index, at_risk, geography: Geography, sites,
                 config: InterventionConfig, seed, replication):
        self.cfg = config
        self.thr_pop = -np.log1p(-config.notify_quantile) / model.gamma[:, 0]
        self.area_pop = np.asarray(area_index, dtype=np.int64)
        self.risk_pop = np.asarray(at_risk, dtype=bool)
        if len(self.area_pop) != len(model) or len(self.risk_pop) != len(model):
            raise ValueError("area and at-risk labels need one entry per population row")
        site_idx = [geography.index[s] for s in sites]
        self.in_range = [geography.dist[i] <= config.coverage_radius for i in site_idx]
        self.seed = seed
        self.rep = replication
        self.weekdays_seen = 0
        self.total = self.risky = self.notified = 0
        cap = 1024
        self.thr = np.zeros(cap)
        self.area = np.zeros(cap, dtype=np.int64)
        self.risk = np.zeros(cap, dtype=bool)
        self.ignored = np.zeros(cap, dtype=np.int64)
        self.blocked = np.zeros(cap, dtype=bool)
        self.rngs = {}

    def attach(self, sim):
        sim.p_r = self.cfg.p_r

    def on_new_client(self, c, pop_index, sim):
        if c == len(self.thr):
            for name in ("thr", "area", "risk", "ignored", "blocked"):
                old = getattr(self, name)
                new = np.zeros(2 * len(old), dtype=old.dtype)
                new[: len(old)] = old
                setattr(self, name, new)
        self.thr[c] = self.thr_pop[pop_index]
        self.area[c] = self.area_pop[pop_index]
        self.risk[c] = self.risk_pop[pop_index]

    def _uniform(self, c):
        rng = self.rngs.get(c)
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.rep, 2, c])))
            self.rngs[c] = rng
        return rng.random()

    def daily(self, d, sim):
        if (self.cfg.start_weekday + d) % 7 >= 5 or not self.in_range:
            return
        reach = self.in_range[self.weekdays_seen % len(self.in_range)]
        self.weekdays_seen += 1
        n = sim.size
        due = (~self.blocked[:n]) & reach[self.area[:n]] & ((d - sim.last_time[:n]) > self.thr[:n])
        for c in np.flatnonzero(due).tolist():
            self.notified += 1
            u = self._uniform(c)
            exited = bool(sim.exited[c])
            if (not exited or sim.eligible[c]) and u < self.cfg.p_s:
                self.total += 1
                if self.risk[c] and (exited or sim.passive_until[c] > d):
                    self.risky += 1
                sim.visit(c, float(d))
            else:
                self.ignored[c] += 1
                if self.ignored[c] >= self.cfg.max_ignored:
                    self.blocked[c] = True

    def finish(self, out, sim):
        out.total_interventions = self.total
        out.risky_interventions = self.risky
        out.notifications = self.notified
        out.extra["ignored"] = self.ignored[: sim.size].copy()


def _resolve_sites(model, area_index, at_risk, geography, config):
    if config.van_sites:
        return list(config.van_sites)
    clients = [GeoClient(i, geography.codes[a], tuple(geography.coords[a]), bool(r))
               for i, (a, r) in enumerate(zip(area_index, at_risk))]
    return select_van_sites(clients, config.k_sites, config.coverage_radius, geography)


def run_intervention_replication(model, negbinom, area_index, at_risk, geography: Geography,
                                 config: InterventionConfig, sim_config: SimConfig, replication=0,
                                 sites=None):
    if isinstance(model, CoxianParams):
        model = ClientModel.fixed(model)
    if sites is None:
        sites = _resolve_sites(model, area_index, at_risk, geography, config)
    policy = VanPolicy(model, area_index, at_risk, geography, sites, config, sim_config.seed,
                       replication)
    return run_lifecycle_sim(model, negbinom, sim_config, replication, policy=policy)


def run_intervention_sim(model, negbinom, area_index, at_risk, geography: Geography,
                         config: InterventionConfig, sim_config: SimConfig = SimConfig()):
    """Run ``sim_config.replications`` replications and summarize them.

    ``area_index`` and ``at_risk`` label each population row of ``model``.
    Confidence half-widths are 95% normal intervals across replications.
    """
    if isinstance(model, CoxianParams):
        model = ClientModel.fixed(model)
    sites = _resolve_sites(model, area_index, at_risk, geography, config)
    outs = [run_intervention_replication(model, negbinom, area_index, at_risk, geography, config,
                                         sim_config, r, sites)
            for r in range(sim_config.replications)]
    arr = np.array([o.avg_daily_arrivals for o in outs])
    tot = np.array([o.total_interventions for o in outs], dtype=float)
    risky = np.array([o.risky_interventions for o in outs], dtype=float)
    a, ah = mean_ci(arr)
    t, th = mean_ci(tot)
    r, rh = mean_ci(risky)
    return InterventionOutput(a, ah, t, th, r, rh, list(sites), arr, tot, risky,
                              np.array([o.notifications for o in outs], dtype=float))


SWEEP_HEADER = ["p_s", "avg_daily_arrivals", "ci_halfwidth", "risky", "risky_ci", "total", "total_ci"]


def intervention_sweep(model, negbinom, area_index, at_risk, geography, config: InterventionConfig,
                       sim_config: SimConfig, p_s_values=(0.0, 0.01, 0.03, 0.05, 0.07, 0.09)):
    """One :class:`InterventionOutput` per success probability, sharing seeds."""
    rows = []
    for ps in p_s_values:
        cfg = InterventionConfig(**{**config.__dict__, "p_s": float(ps)})
        rows.append((float(ps), run_intervention_sim(model, negbinom, area_index, at_risk,
                                                     geography, cfg, sim_config)))
    return rows


def write_sweep_csv(path, rows):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for ps, o in rows:
            w.writerow([ps, o.avg_daily_arrivals, o.arrivals_ci, o.risky_interventions, o.risky_ci,
                        o.total_interventions, o.total_ci])
