"""Maximum-likelihood fitting of the featureless and contextual models.

Constraints are removed by reparametrization:

* mixture weights through stick-breaking logits (``q_i = sigmoid(z_i)``),
* rates through log-gaps, ``gamma_n = floor + exp(u_n)`` and
  ``gamma_i = gamma_{i+1} + delta + exp(u_i)``,
* exit probabilities through a logit.

Both problems are then solved with the L-BFGS ascent in :mod:`sepmodel.optim`.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .errors import LogDomainError, NonConvergenceError, ParameterDomainError
from .likelihood import (
    ObservationSet,
    RegressionCoefficients,
    _stack_obs,
    delta_inter_arrival,
    delta_sojourn,
    feature_matrix,
    obs_terms,
)
from .optim import lbfgs_ascent
from .phase_type import CoxianParams, FitConfig

log = logging.getLogger(__name__)

_Q_CLIP = 1e-9


# ---------------------------------------------------------------------------
# reparametrizations


def stick_breaking(z):
    """Map logits of shape ``(..., n-1)`` to simplex points ``(..., n)``.

    Returns ``(beta, jac)`` with ``jac[..., i, l] = d beta_i / d z_l``.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[-1] + 1
    q = np.concatenate((expit(z), np.ones(z.shape[:-1] + (1,))), axis=-1)
    beta = np.empty(q.shape)
    surv = np.ones(z.shape[:-1])
    for i in range(n):
        beta[..., i] = q[..., i] * surv
        surv = surv * (1.0 - q[..., i])
    jac = np.zeros(z.shape[:-1] + (n, n - 1))
    for i in range(n):
        for l in range(min(i + 1, n - 1)):
            if l < i:
                jac[..., i, l] = -q[..., l] * beta[..., i]
            else:
                jac[..., i, l] = (1.0 - q[..., i]) * beta[..., i]
    return beta, jac


def beta_to_logits(beta):
    beta = np.asarray(beta, dtype=float)
    n = beta.shape[-1]
    remaining = 1.0 - np.concatenate((np.zeros(beta.shape[:-1] + (1,)),
                                      np.cumsum(beta[..., :-1], axis=-1)), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(remaining > 1e-14, beta / np.where(remaining > 1e-14, remaining, 1.0), 1.0)
    q = np.clip(q[..., : n - 1], _Q_CLIP, 1.0 - _Q_CLIP)
    return logit(q)


def gaps_to_rates(u, config: FitConfig):
    """Log-gaps ``(..., n)`` to strictly ordered rates; returns ``(gamma, jac)``."""
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    e = np.exp(u)
    gamma = np.empty(u.shape)
    acc = np.full(u.shape[:-1], config.gamma_floor)
    for i in range(n - 1, -1, -1):
        acc = acc + e[..., i] + (config.delta if i < n - 1 else 0.0)
        gamma[..., i] = acc
    jac = np.zeros(u.shape + (n,))
    for i in range(n):
        for l in range(i, n):
            jac[..., i, l] = e[..., l]
    return gamma, jac


def rates_to_gaps(gamma, config: FitConfig, min_gap=1e-12):
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[-1]
    gaps = np.empty(gamma.shape)
    gaps[..., n - 1] = gamma[..., n - 1] - config.gamma_floor
    for i in range(n - 1):
        gaps[..., i] = gamma[..., i] - gamma[..., i + 1] - config.delta
    return np.log(np.maximum(gaps, min_gap))


# ---------------------------------------------------------------------------
# results


@dataclass
class FitResult:
    params_or_coeffs: object
    objective_trace: list
    converged: bool
    iterations: int
    seed: int | None
    message: str = ""
    per_client_beta: np.ndarray | None = None
    start_objectives: list = field(default_factory=list)

    @property
    def objective(self):
        return self.objective_trace[-1]

    def to_json(self):
        p = self.params_or_coeffs
        d = {
            "kind": "featureless" if isinstance(p, CoxianParams) else "contextual",
            "params" if isinstance(p, CoxianParams) else "coefficients": p.to_json(),
            "objective_trace": [float(v) for v in self.objective_trace],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "seed": self.seed,
            "message": self.message,
        }
        if self.start_objectives:
            d["start_objectives"] = [float(v) for v in self.start_objectives]
        return d

    @classmethod
    def from_json(cls, d):
        if d["kind"] == "featureless":
            obj = CoxianParams.from_json(d["params"])
        else:
            obj = RegressionCoefficients.from_json(d["coefficients"])
        return cls(obj, d["objective_trace"], d["converged"], d["iterations"], d.get("seed"),
                   d.get("message", ""), None, d.get("start_objectives", []))

    def dumps(self):
        return json.dumps(self.to_json(), indent=2)


# ---------------------------------------------------------------------------
# featureless model


def _split_featureless(theta, n):
    return theta[: n - 1], theta[n - 1: 2 * n - 1], theta[2 * n - 1]


def featureless_objective(obs: ObservationSet, config: FitConfig = FitConfig()):
    """Objective handle ``theta -> (loglik, gradient)`` in the unconstrained space.

    ``theta`` stacks ``n-1`` stick-breaking logits, ``n`` rate log-gaps and
    the exit logit.
    """
    n = config.n_phases
    t, _, cens = _stack_obs(obs)
    N = len(t)

    def fun(theta):
        z, u, w = _split_featureless(np.asarray(theta, dtype=float), n)
        beta, jb = stick_breaking(z)
        gamma, jg = gaps_to_rates(u, config)
        p = expit(w)
        ll, db, dg, dp = obs_terms(np.broadcast_to(beta, (N, n)), np.broadcast_to(gamma, (N, n)),
                                   np.full(N, p), t, cens, grad=True)
        val = float(np.sum(ll))
        if not np.isfinite(val):
            return -np.inf, np.zeros_like(theta)
        grad = np.concatenate((db.sum(axis=0) @ jb, dg.sum(axis=0) @ jg,
                               [dp.sum() * p * (1.0 - p)]))
        return val, grad

    return fun


def featureless_theta(params: CoxianParams, config: FitConfig = FitConfig()):
    p = params.exit_p if params.exit_p is not None else 0.1
    p = min(max(p, _Q_CLIP), 1 - _Q_CLIP)
    return np.concatenate((beta_to_logits(params.beta), rates_to_gaps(params.gamma, config), [logit(p)]))


def featureless_params(theta, config: FitConfig = FitConfig()):
    n = config.n_phases
    z, u, w = _split_featureless(np.asarray(theta, dtype=float), n)
    beta, _ = stick_breaking(z)
    gamma, _ = gaps_to_rates(u, config)
    # renormalize away rounding so the simplex check is exact
    return CoxianParams(beta / beta.sum(), gamma, float(expit(w)))


def _initial_featureless(obs: ObservationSet, config: FitConfig):
    n = config.n_phases
    ts = obs.uncensored_t[obs.uncensored_t > 0]
    med = float(np.median(ts)) if ts.size else float(np.median(obs.censored_t) + 1.0)
    fast = max(np.log(2.0) / max(med, 1e-12), config.gamma_floor + (n - 1) * config.delta * 2)
    gamma = [fast]
    for _ in range(n - 1):
        gamma.append(gamma[-1] / 10.0)
    gamma = np.array(gamma)
    # make room for the gap and floor constraints
    gamma[-1] = max(gamma[-1], config.gamma_floor * 2)
    for i in range(n - 2, -1, -1):
        gamma[i] = max(gamma[i], gamma[i + 1] + 2 * config.delta)
    beta = np.full(n, 0.2 / max(n - 1, 1))
    beta[0] = 0.8 if n > 1 else 1.0
    return CoxianParams(beta / beta.sum(), gamma, 0.1)


def fit_featureless(obs: ObservationSet, config: FitConfig = FitConfig(), seed=0, init=None):
    """Maximize the featureless log-likelihood from several perturbed starts.

    Start 0 is ``init`` (or a data-driven guess); the others perturb it by up
    to +-1 on the mixture and exit logits and +-0.5 on the log-rates.
    """
    if len(obs) == 0:
        raise ValueError("cannot fit an empty observation set")
    n = config.n_phases
    rng = np.random.default_rng(seed)
    base = init if init is not None else _initial_featureless(obs, config)
    fun = featureless_objective(obs, config)
    best = None
    failures = []
    start_values = []
    for k in range(config.n_starts):
        if k == 0:
            theta0 = featureless_theta(base, config)
        else:
            z = beta_to_logits(base.beta) + rng.uniform(-1, 1, n - 1)
            lg = np.log(base.gamma) + rng.uniform(-0.5, 0.5, n)
            gamma = np.sort(np.exp(lg))[::-1]
            gamma[-1] = max(gamma[-1], config.gamma_floor * 1.01)
            for i in range(n - 2, -1, -1):
                gamma[i] = max(gamma[i], gamma[i + 1] + config.delta * 1.01)
            w = logit(min(max(base.exit_p if base.exit_p is not None else 0.1, _Q_CLIP), 1 - _Q_CLIP))
            w += rng.uniform(-1, 1)
            theta0 = np.concatenate((z, rates_to_gaps(gamma, config), [w]))
        res = lbfgs_ascent(fun, theta0, max_iters=config.max_iters, tol=config.tol,
                           grad_tol=config.grad_tol)
        if not np.isfinite(res.fun) or len(res.trace) == 0:
            failures.append(res.message)
            start_values.append(float("-inf"))
            continue
        start_values.append(res.fun)
        log.debug("start %d: loglik %.6f (%s)", k, res.fun, res.message)
        if best is None or res.fun > best[1].fun:
            best = (k, res)
    if best is None:
        raise NonConvergenceError("every start failed: " + "; ".join(failures), trace=start_values)
    k, res = best
    return FitResult(featureless_params(res.x, config), res.trace, res.converged, res.iterations,
                     seed, res.message, start_objectives=start_values)


# ---------------------------------------------------------------------------
# contextual model


def project_gamma_jac(G, config: FitConfig):
    """Projected rates and the Jacobian ``d gamma / d G`` row by row."""
    G = np.asarray(G, dtype=float)
    V, n = G.shape
    out = G.copy()
    J = np.broadcast_to(np.eye(n), (V, n, n)).copy()
    low = out[:, n - 1] < config.gamma_floor
    out[low, n - 1] = config.gamma_floor
    J[low, n - 1, :] = 0.0
    for i in range(n - 2, -1, -1):
        bound = out[:, i + 1] + config.delta
        act = out[:, i] < bound
        out[act, i] = bound[act]
        J[act, i, :] = J[act, i + 1, :]
    return out, J


class ContextualProblem:
    """Penalized contextual log-likelihood with the ridge part profiled out.

    For fixed per-client mixture weights the optimal ``b`` solves a ridge
    regression in closed form, so the search runs over per-client logits,
    rate coefficients (relative to their intercepts) and exit coefficients.
    """

    def __init__(self, obs: ObservationSet, X, intercepts: CoxianParams, config: FitConfig):
        self.obs = obs
        self.X = np.asarray(X, dtype=float)
        self.V, self.m = self.X.shape
        if self.V != obs.n_clients:
            raise ValueError(f"features cover {self.V} clients, observations {obs.n_clients}")
        if intercepts.exit_p is None or not 0 < intercepts.exit_p < 1:
            raise ParameterDomainError("featureless exit probability must lie in (0, 1)")
        self.n = intercepts.n
        self.config = config
        self.b0 = intercepts.beta.copy()
        self.g0 = intercepts.gamma.copy()
        self.rho0 = float(logit(intercepts.exit_p))
        self.t, self.v, self.cens = _stack_obs(obs)
        eb, ebb = config.eta_beta, config.eta_b
        M = eb * self.X.T @ self.X + ebb * np.eye(self.m)
        self._ridge = np.linalg.pinv(M) @ (eb * self.X.T) if self.m else np.zeros((0, self.V))
        self.nz = self.V * (self.n - 1)
        self.size = self.nz + self.n * self.m + self.m

    # packing -------------------------------------------------------------
    def unpack(self, theta):
        z = theta[: self.nz].reshape(self.V, self.n - 1)
        gr = theta[self.nz: self.nz + self.n * self.m].reshape(self.n, self.m)
        rho = theta[self.nz + self.n * self.m:]
        return z, gr, rho

    def initial(self):
        z = np.broadcast_to(beta_to_logits(self.b0), (self.V, self.n - 1)).reshape(-1)
        return np.concatenate((z, np.zeros(self.n * self.m), np.zeros(self.m)))

    def ridge_b(self, beta):
        """Optimal covariate block of ``b`` for per-client weights ``beta``."""
        resid = beta - self.b0[None, :]
        return (self._ridge @ resid).T

    # objective -------------------------------------------------------------
    def evaluate(self, theta, grad=True, parts=False):
        cfg = self.config
        z, gr, rho = self.unpack(theta)
        beta, jb = stick_breaking(z)
        g_cov = gr * self.g0[:, None]
        G_raw = self.g0[None, :] + self.X @ g_cov.T
        gamma, jg = project_gamma_jac(G_raw, cfg)
        eta = self.rho0 + self.X @ rho
        p = expit(eta)
        v = self.v
        if grad:
            ll, db, dgm, dp = obs_terms(beta[v], gamma[v], p[v], self.t, self.cens, grad=True)
        else:
            ll = obs_terms(beta[v], gamma[v], p[v], self.t, self.cens)
        loglik = float(np.sum(ll))
        b_cov = self.ridge_b(beta)
        eps = beta - self.b0[None, :] - self.X @ b_cov.T
        pen_eps = cfg.eta_beta * float(np.sum(eps ** 2))
        pen_b = cfg.eta_b * float(np.sum(b_cov ** 2))
        pen_g = cfg.eta_g * float(np.sum(g_cov ** 2))
        pen_rho = cfg.eta_rho * float(np.sum(rho ** 2))
        total = loglik - pen_eps - pen_b - pen_g - pen_rho
        if parts:
            return dict(loglik=loglik, eps=pen_eps, b=pen_b, g=pen_g, rho=pen_rho, total=total,
                        beta=beta, gamma=gamma, p=p, b_cov=b_cov, g_cov=g_cov)
        if not grad:
            return total
        if not np.isfinite(total):
            return -np.inf, np.zeros_like(theta)
        V, n = self.V, self.n
        dbeta = np.column_stack([np.bincount(v, db[:, k], minlength=V) for k in range(n)])
        dbeta -= 2.0 * cfg.eta_beta * eps
        dz = np.einsum("vk,vkl->vl", dbeta, jb)
        dgam = np.column_stack([np.bincount(v, dgm[:, k], minlength=V) for k in range(n)])
        dgraw = np.einsum("vk,vkl->vl", dgam, jg)
        dg_cov = dgraw.T @ self.X - 2.0 * cfg.eta_g * g_cov
        dgr = dg_cov * self.g0[:, None]
        dpv = np.bincount(v, dp, minlength=V) * p * (1.0 - p)
        drho = self.X.T @ dpv - 2.0 * cfg.eta_rho * rho
        return total, np.concatenate((dz.reshape(-1), dgr.reshape(-1), drho))

    def fisher_diag(self, theta):
        """Diagonal of the empirical Fisher information plus penalty curvature."""
        cfg = self.config
        z, gr, rho = self.unpack(theta)
        beta, jb = stick_breaking(z)
        G_raw = self.g0[None, :] + self.X @ (gr * self.g0[:, None]).T
        gamma, jg = project_gamma_jac(G_raw, cfg)
        p = expit(self.rho0 + self.X @ rho)
        v = self.v
        _, db, dgm, dp = obs_terms(beta[v], gamma[v], p[v], self.t, self.cens, grad=True)
        dz_obs = np.einsum("ok,okl->ol", db, jb[v])
        dz = np.column_stack([np.bincount(v, dz_obs[:, l] ** 2, minlength=self.V)
                              for l in range(self.n - 1)]) if self.n > 1 else np.zeros((self.V, 0))
        dz += 2.0 * cfg.eta_beta * np.einsum("vkl,vkl->vl", jb, jb)
        draw = np.einsum("ok,okl->ol", dgm, jg[v])
        Xo = self.X[v]
        dg = np.einsum("ok,oj->kj", draw ** 2, Xo ** 2) * self.g0[:, None] ** 2
        dg += 2.0 * cfg.eta_g * self.g0[:, None] ** 2
        dpo = dp * p[v] * (1.0 - p[v])
        dr = (dpo[:, None] ** 2 * Xo ** 2).sum(axis=0) + 2.0 * cfg.eta_rho
        return np.concatenate((dz.reshape(-1), dg.reshape(-1), dr))

    def coefficients(self, theta, feature_names=()):
        d = self.evaluate(theta, grad=False, parts=True)
        b = np.column_stack((self.b0, d["b_cov"]))
        g = np.column_stack((self.g0, d["g_cov"]))
        rho = np.concatenate(([self.rho0], self.unpack(theta)[2]))
        return RegressionCoefficients(b, g, rho, tuple(feature_names) or ()), d["beta"]


def fit_contextual(obs: ObservationSet, features, featureless: CoxianParams,
                   config: FitConfig = FitConfig(), seed=0, feature_names=()):
    """Fit covariate effects around fixed featureless intercepts.

    Starts from zero covariate coefficients with every client at the
    intercepts.  Returns a :class:`FitResult` whose ``params_or_coeffs`` is a
    :class:`RegressionCoefficients` and whose ``per_client_beta`` holds the
    fitted per-client mixture weights.
    """
    X = feature_matrix(features)
    prob = ContextualProblem(obs, X, featureless, config)
    theta0 = prob.initial()
    f0 = prob.evaluate(theta0, grad=False)
    if not np.isfinite(f0):
        raise LogDomainError("objective is not finite at the featureless starting point")
    diag = prob.fisher_diag(theta0)
    scale = 1.0 / np.sqrt(np.maximum(diag, 1e-12))

    def fun(y):
        val, g = prob.evaluate(theta0 + scale * y)
        return val, g * scale

    res = lbfgs_ascent(fun, np.zeros_like(theta0), max_iters=config.max_iters, tol=config.tol,
                       grad_tol=config.grad_tol, memory=20)
    if not np.isfinite(res.fun):
        raise NonConvergenceError("contextual fit produced a non-finite objective", trace=res.trace)
    theta = theta0 + scale * res.x
    coeffs, beta = prob.coefficients(theta, feature_names or tuple(f"x{j}" for j in range(1, prob.m + 1)))
    return FitResult(coeffs, res.trace, res.converged, res.iterations, seed, res.message,
                     per_client_beta=beta)


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapTable:
    """Positive-sign counts per feature across bootstrap refits.

    ``negative`` holds the matching negative-sign counts; a coefficient that
    is exactly zero (a feature constant in the data) counts as neither.
    """

    feature_names: tuple
    columns: tuple
    counts: np.ndarray
    B: int
    n_failed: int = 0
    negative: np.ndarray | None = None

    @property
    def n_used(self):
        return self.B - self.n_failed

    @property
    def significant(self):
        used = self.n_used
        neg = used - self.counts if self.negative is None else self.negative
        return (self.counts >= 0.9 * used) | (neg >= 0.9 * used)

    @property
    def _neg(self):
        return self.n_used - self.counts if self.negative is None else self.negative

    def count(self, feature, column):
        i = self.feature_names.index(feature) if not isinstance(feature, int) else feature
        return int(self.counts[i, self.columns.index(column)])

    def to_json(self):
        return {
            "B": self.B,
            "n_failed": self.n_failed,
            "columns": list(self.columns),
            "rows": [
                {"feature": f, **{c: int(self.counts[i, k]) for k, c in enumerate(self.columns)},
                 "negative": {c: int(self._neg[i, k]) for k, c in enumerate(self.columns)},
                 "significant": {c: bool(self.significant[i, k]) for k, c in enumerate(self.columns)}}
                for i, f in enumerate(self.feature_names)
            ],
        }

    def format(self):
        width = max([len("Factor")] + [len(f) for f in self.feature_names])
        head = f"{'Factor':<{width}} " + " ".join(f"{c:>7}" for c in self.columns)
        lines = [head, "-" * len(head)]
        for i, f in enumerate(self.feature_names):
            cells = []
            for k in range(len(self.columns)):
                mark = "*" if self.significant[i, k] else " "
                cells.append(f"{self.counts[i, k]:>6d}{mark}")
            lines.append(f"{f:<{width}} " + " ".join(cells))
        lines.append(f"(* = same sign in at least 90% of {self.n_used} replicates)")
        return "\n".join(lines)


def coefficient_signs(coeffs: RegressionCoefficients, config: FitConfig = FitConfig()):
    """Columns ``rho, b1..b_{n-1}, g1..g_n, Delta, T`` for every feature, as a matrix."""
    cols = ["rho"] + [f"b{i + 1}" for i in range(max(coeffs.n - 1, 0))] + \
           [f"g{i + 1}" for i in range(coeffs.n)] + ["Delta", "T"]
    rows = []
    for j in range(1, coeffs.m + 1):
        row = [coeffs.rho[j]]
        row += [coeffs.b[i, j] for i in range(coeffs.n - 1)]
        row += [coeffs.g[i, j] for i in range(coeffs.n)]
        row += [delta_inter_arrival(coeffs, j, config), delta_sojourn(coeffs, j, config)]
        rows.append(row)
    return tuple(cols), np.array(rows).reshape(coeffs.m, len(cols))


def _replicate(args):
    obs, X, featureless, config, seed, r, names = args
    rng = np.random.default_rng([seed, r])
    idx = rng.integers(0, obs.n_clients, obs.n_clients)
    sub = obs.subset_clients(idx)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = fit_contextual(sub, X[idx], featureless, config, seed=r, feature_names=names)
    except (NonConvergenceError, LogDomainError) as exc:
        return r, None, str(exc)
    if not res.converged:
        return r, None, res.message
    _, vals = coefficient_signs(res.params_or_coeffs, config)
    return r, vals, ""


def bootstrap_significance(obs: ObservationSet, features, featureless: CoxianParams,
                           config: FitConfig = FitConfig(), B=100, seed=0, n_jobs=1,
                           feature_names=(), max_fail_frac=0.1):
    """Client-block bootstrap of the contextual fit.

    Each replicate draws clients with replacement (keeping each client's gaps
    together), refits with the intercepts held at ``featureless`` and records
    which coefficients come out positive.
    """
    X = feature_matrix(features)
    names = tuple(feature_names) or tuple(f"x{j}" for j in range(1, X.shape[1] + 1))
    jobs = [(obs, X, featureless, config, seed, r, names) for r in range(B)]
    if n_jobs == 1:
        results = [_replicate(a) for a in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_replicate, jobs))
    cols = None
    counts = None
    failed = 0
    for r, vals, msg in sorted(results, key=lambda x: x[0]):
        if vals is None:
            failed += 1
            log.warning("bootstrap replicate %d skipped: %s", r, msg)
            continue
        if counts is None:
            counts = np.zeros(vals.shape, dtype=int)
            neg = np.zeros(vals.shape, dtype=int)
        counts += (vals > 0).astype(int)
        neg += (vals < 0).astype(int)
    if failed > max_fail_frac * B:
        raise NonConvergenceError(f"{failed} of {B} bootstrap replicates failed")
    probe = RegressionCoefficients.featureless(featureless, names)
    cols, _ = coefficient_signs(probe, config)
    if counts is None:
        counts = np.zeros((len(names), len(cols)), dtype=int)
        neg = counts.copy()
    return BootstrapTable(names, cols, counts, B, failed, neg)
