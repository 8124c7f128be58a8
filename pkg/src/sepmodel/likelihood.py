"""Censored log-likelihoods for Coxian inter-arrival data with per-visit exit.

An uncensored gap ``t`` of client ``v`` contributes ``log f_v(t) + log(1 - p_v)``:
the client stayed after the visit and returned after ``t`` days.  The final,
right-censored gap contributes ``log(S_v(t) (1 - p_v) + p_v)``: either the
client left after the last visit or it has not yet returned.

Client parameters come from affine maps of the features (for the mixture
weights and rates) and a logistic map (for the exit probability).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .errors import (
    DataFormatError,
    DomainError,
    InfiniteSojournError,
    LogDomainError,
    ParameterDomainError,
)
from .phase_type import TINY, CoxianParams, FitConfig, coxian_mean


@dataclass(frozen=True)
class ClientFeatures:
    x: np.ndarray
    client_id: object = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise DomainError("feature values must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)


def feature_matrix(features):
    """Stack a list of :class:`ClientFeatures` (or pass an array through)."""
    if isinstance(features, np.ndarray):
        X = np.asarray(features, dtype=float)
        return X.reshape(len(X), -1)
    if len(features) == 0:
        return np.zeros((0, 0))
    return np.vstack([np.asarray(f.x if isinstance(f, ClientFeatures) else f, dtype=float)
                      for f in features])


@dataclass
class ObservationSet:
    """Uncensored gaps ``(t_s, v(s))`` and right-censored gaps ``(t_u, v(u))``.

    Client indices point into ``client_ids`` when that is given.
    """

    uncensored_t: np.ndarray
    uncensored_client: np.ndarray
    censored_t: np.ndarray
    censored_client: np.ndarray
    client_ids: list | None = None
    n_clients: int = field(default=None)

    def __post_init__(self):
        self.uncensored_t = np.asarray(self.uncensored_t, dtype=float).reshape(-1)
        self.censored_t = np.asarray(self.censored_t, dtype=float).reshape(-1)
        self.uncensored_client = np.asarray(self.uncensored_client, dtype=np.int64).reshape(-1)
        self.censored_client = np.asarray(self.censored_client, dtype=np.int64).reshape(-1)
        if self.uncensored_t.shape != self.uncensored_client.shape:
            raise DomainError("uncensored times and clients differ in length")
        if self.censored_t.shape != self.censored_client.shape:
            raise DomainError("censored times and clients differ in length")
        for t in (self.uncensored_t, self.censored_t):
            if np.any(~np.isfinite(t)) or np.any(t < 0):
                raise DomainError("observation times must be finite and nonnegative")
        top = max(self.uncensored_client.max(initial=-1), self.censored_client.max(initial=-1)) + 1
        if self.n_clients is None:
            self.n_clients = len(self.client_ids) if self.client_ids is not None else int(top)
        if self.client_ids is not None and len(self.client_ids) != self.n_clients:
            raise DomainError("client_ids length disagrees with n_clients")
        if top > self.n_clients or min(self.uncensored_client.min(initial=0),
                                       self.censored_client.min(initial=0)) < 0:
            raise DomainError("client index out of range")
        if len(np.unique(self.censored_client)) != len(self.censored_client):
            raise DomainError("a client appears more than once among censored gaps")

    @classmethod
    def empty(cls):
        return cls([], [], [], [])

    def __len__(self):
        return len(self.uncensored_t) + len(self.censored_t)

    def _ids(self):
        if self.client_ids is None:
            return list(range(self.n_clients))
        return list(self.client_ids)

    def records(self):
        """Canonical ``(kind, client_id, t)`` tuples, sorted."""
        ids = self._ids()
        rec = [("S", str(ids[v]), float(t)) for t, v in zip(self.uncensored_t, self.uncensored_client)]
        rec += [("U", str(ids[v]), float(t)) for t, v in zip(self.censored_t, self.censored_client)]
        return sorted(rec)

    def same_as(self, other):
        return self.records() == other.records()

    def subset_clients(self, clients):
        """Observations of the listed clients, re-indexed ``0..len(clients)-1``.

        A client listed twice becomes two independent pseudo-clients.
        """
        clients = np.asarray(clients, dtype=np.int64)
        by_client_s = _group(self.uncensored_client, self.n_clients)
        by_client_u = _group(self.censored_client, self.n_clients)
        ts, vs, tu, vu = [], [], [], []
        for new, old in enumerate(clients):
            idx = by_client_s[old]
            ts.append(self.uncensored_t[idx])
            vs.append(np.full(len(idx), new))
            idx = by_client_u[old]
            tu.append(self.censored_t[idx])
            vu.append(np.full(len(idx), new))
        cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)
        ids = None
        if self.client_ids is not None:
            ids = [f"{self.client_ids[old]}#{new}" for new, old in enumerate(clients)]
        return ObservationSet(cat(ts, float), cat(vs, np.int64), cat(tu, float), cat(vu, np.int64),
                              client_ids=ids, n_clients=len(clients))

    def scaled(self, c):
        return ObservationSet(self.uncensored_t * c, self.uncensored_client, self.censored_t * c,
                              self.censored_client, self.client_ids, self.n_clients)

    def to_csv(self, directory):
        """Write ``uncensored.csv`` and ``censored.csv`` (``client_id,gap_days``)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ids = self._ids()
        for name, ts, vs in (("uncensored.csv", self.uncensored_t, self.uncensored_client),
                             ("censored.csv", self.censored_t, self.censored_client)):
            with open(directory / name, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["client_id", "gap_days"])
                for t, v in zip(ts, vs):
                    w.writerow([ids[v], repr(float(t))])

    @classmethod
    def from_csv(cls, directory):
        directory = Path(directory)
        rows = {}
        for name in ("uncensored.csv", "censored.csv"):
            out = []
            with open(directory / name, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header != ["client_id", "gap_days"]:
                    raise DataFormatError(f"{name}: unexpected header {header}", line=1)
                for lineno, row in enumerate(reader, start=2):
                    if len(row) != 2:
                        raise DataFormatError(f"{name}: expected 2 fields", line=lineno)
                    try:
                        out.append((row[0], float(row[1])))
                    except ValueError as exc:
                        raise DataFormatError(f"{name}: {exc}", line=lineno) from None
            rows[name] = out
        ids = sorted({c for part in rows.values() for c, _ in part})
        index = {c: i for i, c in enumerate(ids)}
        s, u = rows["uncensored.csv"], rows["censored.csv"]
        return cls([t for _, t in s], [index[c] for c, _ in s], [t for _, t in u],
                   [index[c] for c, _ in u], client_ids=ids)


def _group(clients, n_clients):
    order = np.argsort(clients, kind="stable")
    bounds = np.searchsorted(clients[order], np.arange(n_clients + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n_clients)]


@dataclass
class RegressionCoefficients:
    """Affine maps to mixture weights and rates, logistic map to exit probability.

    Column 0 of ``b`` and ``g`` and entry 0 of ``rho`` are intercepts; column
    ``j`` multiplies feature ``j`` (1-based, matching ``feature_names[j-1]``).
    """

    b: np.ndarray
    g: np.ndarray
    rho: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        self.g = np.atleast_2d(np.asarray(self.g, dtype=float))
        self.rho = np.asarray(self.rho, dtype=float).reshape(-1)
        if self.b.shape != self.g.shape or self.b.shape[1] != self.rho.size:
            raise DomainError("coefficient shapes disagree")
        for a in (self.b, self.g, self.rho):
            if not np.all(np.isfinite(a)):
                raise DomainError("coefficients must be finite")
        if not self.feature_names:
            self.feature_names = tuple(f"x{j}" for j in range(1, self.m + 1))
        self.feature_names = tuple(self.feature_names)
        if len(self.feature_names) != self.m:
            raise DomainError("feature_names length disagrees with coefficients")

    @property
    def n(self):
        return self.b.shape[0]

    @property
    def m(self):
        return self.b.shape[1] - 1

    @classmethod
    def featureless(cls, params: CoxianParams, feature_names):
        """Zero covariate effects around the intercepts of a featureless fit."""
        m = len(feature_names)
        b = np.zeros((params.n, m + 1))
        g = np.zeros((params.n, m + 1))
        rho = np.zeros(m + 1)
        b[:, 0] = params.beta
        g[:, 0] = params.gamma
        if params.exit_p is None:
            raise DomainError("featureless params need exit_p")
        rho[0] = logit(params.exit_p)
        return cls(b, g, rho, tuple(feature_names))

    def intercept_params(self):
        return CoxianParams(self.b[:, 0], self.g[:, 0], float(expit(self.rho[0])))

    def copy(self):
        return RegressionCoefficients(self.b.copy(), self.g.copy(), self.rho.copy(), self.feature_names)

    def to_json(self):
        return {
            "columns": ["intercept", *self.feature_names],
            "b": self.b.tolist(),
            "g": self.g.tolist(),
            "rho": self.rho.tolist(),
        }

    @classmethod
    def from_json(cls, d):
        cols = list(d["columns"])
        if cols[0] != "intercept":
            raise DataFormatError("first coefficient column must be 'intercept'")
        return cls(d["b"], d["g"], d["rho"], tuple(cols[1:]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ObjectiveValue:
    loglik: float
    penalty_eps: float
    penalty_b: float
    penalty_g: float
    penalty_rho: float
    total: float


# ---------------------------------------------------------------------------
# vectorized per-observation terms


def hypo_terms(gamma, t, grad=False):
    """Branch densities and survivals for per-row rates.

    ``gamma`` has shape ``(N, n)`` and ``t`` shape ``(N,)``.  Returns
    ``(f, S)`` of shape ``(N, n)`` (branch ``k`` in column ``k``) and, with
    ``grad=True``, their derivatives with respect to each rate, shape
    ``(N, n, n)`` indexed ``[row, branch, rate]``.
    """
    gamma = np.asarray(gamma, dtype=float)
    t = np.asarray(t, dtype=float)
    N, n = gamma.shape
    E = np.exp(-gamma * t[:, None])
    f = np.zeros((N, n))
    S = np.zeros((N, n))
    if grad:
        df = np.zeros((N, n, n))
        dS = np.zeros((N, n, n))
    inv_g = 1.0 / gamma
    for k in range(n):
        prod = np.prod(gamma[:, : k + 1], axis=1)
        for j in range(k + 1):
            denom = np.ones(N)
            for l in range(k + 1):
                if l != j:
                    denom = denom * (gamma[:, l] - gamma[:, j])
            w = prod / denom
            fj = w * E[:, j]
            Sj = fj * inv_g[:, j]
            f[:, k] += fj
            S[:, k] += Sj
            if grad:
                for m in range(k + 1):
                    if m == j:
                        dlog = inv_g[:, m].copy()
                        for l in range(k + 1):
                            if l != j:
                                dlog += 1.0 / (gamma[:, l] - gamma[:, j])
                        df[:, k, m] += fj * (dlog - t)
                        dS[:, k, m] += Sj * (dlog - inv_g[:, j] - t)
                    else:
                        dlog = inv_g[:, m] - 1.0 / (gamma[:, m] - gamma[:, j])
                        df[:, k, m] += fj * dlog
                        dS[:, k, m] += Sj * dlog
    if grad:
        return f, S, df, dS
    return f, S


def obs_terms(beta, gamma, p, t, censored, grad=False):
    """Per-observation log-likelihood contributions.

    All arguments are per-row arrays (``beta``/``gamma`` of shape ``(N, n)``).
    Returns ``ll`` and, with ``grad=True``, ``(d_beta, d_gamma, d_p)``.
    Rows whose density or probability falls below ``1e-300`` get ``-inf``.
    """
    censored = np.asarray(censored, dtype=bool)
    p = np.asarray(p, dtype=float)
    if grad:
        fb, Sb, dfb, dSb = hypo_terms(gamma, t, grad=True)
    else:
        fb, Sb = hypo_terms(gamma, t)
    f = np.einsum("nk,nk->n", beta, fb)
    S = np.clip(np.einsum("nk,nk->n", beta, Sb), 0.0, 1.0)
    D = S * (1.0 - p) + p
    val = np.where(censored, D, f)
    bad = ~(val >= TINY)
    safe = np.where(bad, 1.0, val)
    with np.errstate(divide="ignore"):
        log1mp = np.log1p(-p)
    ll = np.where(censored, np.log(safe), np.log(safe) + log1mp)
    ll = np.where(bad, -np.inf, ll)
    if not grad:
        return ll
    r = 1.0 / safe
    c = censored[:, None]
    d_beta = np.where(c, (1.0 - p)[:, None] * Sb * r[:, None], fb * r[:, None])
    dg_f = np.einsum("nk,nkm->nm", beta, dfb)
    dg_S = np.einsum("nk,nkm->nm", beta, dSb)
    d_gamma = np.where(c, (1.0 - p)[:, None] * dg_S * r[:, None], dg_f * r[:, None])
    with np.errstate(divide="ignore"):
        d_p = np.where(censored, (1.0 - S) * r, -1.0 / (1.0 - p))
    return ll, d_beta, d_gamma, d_p


def _stack_obs(obs: ObservationSet):
    t = np.concatenate((obs.uncensored_t, obs.censored_t))
    v = np.concatenate((obs.uncensored_client, obs.censored_client))
    cens = np.concatenate((np.zeros(len(obs.uncensored_t), bool), np.ones(len(obs.censored_t), bool)))
    return t, v, cens


def _raise_first_bad(ll, cens, n_unc):
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        i = int(bad[0])
        if cens[i]:
            raise LogDomainError(f"censored term {i - n_unc} has probability below 1e-300",
                                 index=i - n_unc, kind="censored")
        raise LogDomainError(f"density of uncensored gap {i} below 1e-300", index=i, kind="uncensored")


def featureless_loglik(beta, gamma, p, obs: ObservationSet):
    """Log-likelihood of one parameter set shared by every client."""
    params = CoxianParams(beta, gamma)
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ParameterDomainError(f"exit probability must lie in [0, 1], got {p}")
    if len(obs) == 0:
        return 0.0
    t, _, cens = _stack_obs(obs)
    N = len(t)
    ll = obs_terms(np.broadcast_to(params.beta, (N, params.n)),
                   np.broadcast_to(params.gamma, (N, params.n)), np.full(N, p), t, cens)
    _raise_first_bad(ll, cens, len(obs.uncensored_t))
    return float(np.sum(ll))


# ---------------------------------------------------------------------------
# prediction maps


def project_beta(B):
    """Clip rows to [0, 1] and renormalize onto the simplex."""
    B = np.clip(np.asarray(B, dtype=float), 0.0, 1.0)
    s = B.sum(axis=-1, keepdims=True)
    n = B.shape[-1]
    return np.where(s > 0, B / np.where(s > 0, s, 1.0), 1.0 / n)


def project_gamma(G, config: FitConfig):
    """Raise the slowest rate to the floor, then enforce the minimum gaps upward."""
    G = np.array(G, dtype=float, copy=True)
    n = G.shape[-1]
    G[..., n - 1] = np.maximum(G[..., n - 1], config.gamma_floor)
    for i in range(n - 2, -1, -1):
        G[..., i] = np.maximum(G[..., i], G[..., i + 1] + config.delta)
    return G


def affine_params(coeffs: RegressionCoefficients, X):
    """Raw (unprojected) mixture weights, rates and exit probabilities, row per client."""
    X = np.asarray(X, dtype=float).reshape(-1, coeffs.m)
    Xa = np.hstack((np.ones((len(X), 1)), X))
    return Xa @ coeffs.b.T, Xa @ coeffs.g.T, expit(Xa @ coeffs.rho)


def predict_arrays(coeffs: RegressionCoefficients, X, config: FitConfig = FitConfig()):
    """Feasible ``(beta, gamma, p)`` for every row of ``X``."""
    B, G, p = affine_params(coeffs, X)
    return project_beta(B), project_gamma(G, config), p


def predict_client_params(coeffs: RegressionCoefficients, x, config: FitConfig = FitConfig()):
    """Coxian parameters and exit probability of one client."""
    x = x.x if isinstance(x, ClientFeatures) else x
    B, G, p = affine_params(coeffs, np.asarray(x, dtype=float).reshape(1, -1))
    beta = project_beta(B)
    shift = float(np.max(np.abs(beta - B)))
    if shift > 0.2:
        warnings.warn(f"mixture weights projected by {shift:.3f} onto the simplex", RuntimeWarning,
                      stacklevel=2)
    gamma = project_gamma(G, config)
    return CoxianParams(beta[0], gamma[0], float(p[0]))


def expected_sojourn(params: CoxianParams):
    """Expected time from first to last visit: mean gap times expected number of returns."""
    p = params.exit_p
    if p is None:
        raise DomainError("expected_sojourn needs exit_p")
    if p <= 0.0:
        raise InfiniteSojournError("a client with exit probability 0 never leaves")
    return coxian_mean(params) * (1.0 - p) / p


def _unit(coeffs, j):
    if not 1 <= j <= coeffs.m:
        raise DomainError(f"feature index must lie in 1..{coeffs.m}, got {j}")
    x = np.zeros(coeffs.m)
    x[j - 1] = 1.0
    return x


def delta_inter_arrival(coeffs: RegressionCoefficients, j, config: FitConfig = FitConfig()):
    """Change in the mean gap when feature ``j`` (1-based) is switched on alone."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        base = predict_client_params(coeffs, np.zeros(coeffs.m), config)
        one = predict_client_params(coeffs, _unit(coeffs, j), config)
    return coxian_mean(one) - coxian_mean(base)


def delta_sojourn(coeffs: RegressionCoefficients, j, config: FitConfig = FitConfig()):
    """Change in expected sojourn when feature ``j`` (1-based) is switched on alone."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        base = predict_client_params(coeffs, np.zeros(coeffs.m), config)
        one = predict_client_params(coeffs, _unit(coeffs, j), config)
    return expected_sojourn(one) - expected_sojourn(base)


# ---------------------------------------------------------------------------
# contextual objective


def penalties(coeffs, per_client_beta, X, config):
    """Weighted penalty terms ``(eps, b, g, rho)``; intercepts are not penalized."""
    B, _, _ = affine_params(coeffs, X)
    eps = np.asarray(per_client_beta, dtype=float) - B
    return (config.eta_beta * float(np.sum(eps ** 2)),
            config.eta_b * float(np.sum(coeffs.b[:, 1:] ** 2)),
            config.eta_g * float(np.sum(coeffs.g[:, 1:] ** 2)),
            config.eta_rho * float(np.sum(coeffs.rho[1:] ** 2)))


def contextual_objective(coeffs: RegressionCoefficients, per_client_beta, per_client_gamma,
                         obs: ObservationSet, features, config: FitConfig = FitConfig()):
    """Penalized log-likelihood of the contextual model.

    ``per_client_beta`` and ``per_client_gamma`` are ``(V, n)`` arrays of
    client parameters.  Passing ``None`` for the rates uses the projected
    affine map, which is what the fit optimizes over.
    """
    X = feature_matrix(features)
    V = obs.n_clients
    if X.shape != (V, coeffs.m):
        raise DomainError(f"features have shape {X.shape}, expected {(V, coeffs.m)}")
    beta = np.asarray(per_client_beta, dtype=float)
    if beta.shape != (V, coeffs.n):
        raise DomainError(f"per-client beta has shape {beta.shape}, expected {(V, coeffs.n)}")
    if np.any(beta < 0) or np.any(np.abs(beta.sum(axis=1) - 1.0) > 1e-9):
        raise ParameterDomainError("per-client beta must lie on the simplex")
    if per_client_gamma is None:
        _, G, _ = affine_params(coeffs, X)
        gamma = project_gamma(G, config)
    else:
        gamma = np.asarray(per_client_gamma, dtype=float)
        if gamma.shape != (V, coeffs.n):
            raise DomainError(f"per-client gamma has shape {gamma.shape}, expected {(V, coeffs.n)}")
    _, _, p = affine_params(coeffs, X)
    t, v, cens = _stack_obs(obs)
    if len(t):
        ll = obs_terms(beta[v], gamma[v], p[v], t, cens)
        _raise_first_bad(ll, cens, len(obs.uncensored_t))
        loglik = float(np.sum(ll))
    else:
        loglik = 0.0
    pe, pb, pg, pr = penalties(coeffs, beta, X, config)
    return ObjectiveValue(loglik, pe, pb, pg, pr, loglik - pe - pb - pg - pr)
