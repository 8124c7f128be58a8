r"""Coxian phase-type distributions in closed form.

A Coxian variable with ``n`` phases is written here in its mixture form:
with probability ``beta[k-1]`` the time to absorption is a sum of independent
exponentials with rates ``gamma[0], ..., gamma[k-1]``.  Branch ``k`` therefore
has the hypoexponential density

.. math:: f_k(t) = \Big(\prod_{l\le k}\gamma_l\Big)
          \sum_{j\le k} \frac{e^{-\gamma_j t}}{\prod_{l\le k, l\ne j}(\gamma_l-\gamma_j)}

which requires pairwise distinct rates.  Rates are kept strictly decreasing,
so phase 1 is the fast ("active") phase and later phases are slower.

A general phase-type distribution ``(alpha, Q, a)`` is supported through a
matrix exponential, which is used as an independent check of the closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import (
    DomainError,
    ParameterDomainError,
    TailUnderflowError,
    UnsupportedOrderError,
)

SIMPLEX_TOL = 1e-9
TINY = 1e-300


@dataclass(frozen=True)
class FitConfig:
    """Feasibility margins, regularization weights and optimizer controls."""

    delta: float = 0.005
    gamma_floor: float = 0.0005
    eta_beta: float = 100.0
    eta_b: float = 100.0
    eta_g: float = 1000.0
    eta_rho: float = 10.0
    max_iters: int = 500
    tol: float = 1e-8
    grad_tol: float = 1e-6
    n_starts: int = 8
    n_phases: int = 2

    def __post_init__(self):
        if not self.delta > 0:
            raise ParameterDomainError("delta must be positive")
        if not self.gamma_floor > 0:
            raise ParameterDomainError("gamma_floor must be positive")
        for name in ("eta_beta", "eta_b", "eta_g", "eta_rho"):
            if getattr(self, name) < 0:
                raise ParameterDomainError(f"{name} must be nonnegative")
        if not 1 <= self.n_phases <= 3:
            raise ParameterDomainError("n_phases must be 1, 2 or 3")

    def scaled(self, c):
        """Config for data whose time unit is multiplied by ``c``."""
        return FitConfig(**{**self.__dict__, "delta": self.delta / c,
                            "gamma_floor": self.gamma_floor / c})


def _as_readonly(x):
    a = np.array(x, dtype=float, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CoxianParams:
    """Coxian parameters in mixture form plus an optional per-visit exit probability.

    Construction checks that ``beta`` is on the simplex and that ``gamma`` is
    positive and strictly decreasing.  The stricter margins of a fit (minimum
    gap ``delta`` and floor on the slowest rate) are checked by
    :meth:`check_feasible`.
    """

    beta: np.ndarray
    gamma: np.ndarray
    exit_p: float | None = None
    n: int = field(init=False)

    def __post_init__(self):
        beta = _as_readonly(self.beta)
        gamma = _as_readonly(self.gamma)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "n", int(beta.size))
        if beta.size < 1 or beta.size != gamma.size:
            raise ParameterDomainError("beta and gamma must be nonempty and of equal length")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(gamma))):
            raise ParameterDomainError("parameters must be finite")
        if np.any(beta < 0):
            raise ParameterDomainError(f"beta has negative entries: {beta}")
        if abs(beta.sum() - 1.0) > SIMPLEX_TOL:
            raise ParameterDomainError(f"beta must sum to 1, got {beta.sum()!r}")
        if np.any(gamma <= 0):
            raise ParameterDomainError("gamma must be positive")
        if np.any(np.diff(gamma) >= 0):
            raise ParameterDomainError(f"gamma must be strictly decreasing, got {gamma}")
        if self.exit_p is not None:
            p = float(self.exit_p)
            if not 0.0 <= p <= 1.0:
                raise ParameterDomainError(f"exit_p must lie in [0, 1], got {p}")
            object.__setattr__(self, "exit_p", p)

    def check_feasible(self, config: FitConfig = FitConfig(), slack=1e-12):
        """Raise unless the rate gaps and slowest rate respect ``config``."""
        gaps = -np.diff(self.gamma)
        if np.any(gaps < config.delta - slack):
            raise ParameterDomainError(f"rate gaps {gaps} below delta={config.delta}")
        if self.gamma[-1] < config.gamma_floor - slack:
            raise ParameterDomainError(
                f"slowest rate {self.gamma[-1]} below floor {config.gamma_floor}")
        return self

    def with_exit_p(self, p):
        return CoxianParams(self.beta, self.gamma, p)

    def to_json(self):
        d = {"beta": [float(v) for v in self.beta], "gamma": [float(v) for v in self.gamma]}
        if self.exit_p is not None:
            d["exit_p"] = float(self.exit_p)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(d["beta"], d["gamma"], d.get("exit_p"))

    def __eq__(self, other):
        if not isinstance(other, CoxianParams):
            return NotImplemented
        return (np.array_equal(self.beta, other.beta)
                and np.array_equal(self.gamma, other.gamma)
                and self.exit_p == other.exit_p)

    def __hash__(self):
        return hash((self.beta.tobytes(), self.gamma.tobytes(), self.exit_p))


def branch_weights(gamma):
    """Coefficients of the hypoexponential branch densities.

    Returns a lower-triangular ``(n, n)`` array ``w`` with
    ``f_k(t) = sum_j w[k, j] * exp(-gamma[j] * t)`` for branch ``k`` (0-based).
    Works on a trailing axis, so ``gamma`` may have shape ``(..., n)``.
    """
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[-1]
    w = np.zeros(gamma.shape + (n,))
    for k in range(n):
        prod = np.prod(gamma[..., : k + 1], axis=-1)
        for j in range(k + 1):
            denom = np.ones(gamma.shape[:-1])
            for l in range(k + 1):
                if l != j:
                    denom = denom * (gamma[..., l] - gamma[..., j])
            w[..., k, j] = prod / denom
    return w


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0):
        raise DomainError("time must be finite and nonnegative")
    return t


def branch_pdf(params: CoxianParams, t):
    """Densities of every branch, shape ``t.shape + (n,)``."""
    t = _check_t(t)
    w = branch_weights(params.gamma)
    e = np.exp(-np.multiply.outer(t, params.gamma))
    return e @ w.T


def branch_sf(params: CoxianParams, t):
    """Survival functions of every branch, shape ``t.shape + (n,)``."""
    t = _check_t(t)
    w = branch_weights(params.gamma) / params.gamma[None, :]
    e = np.exp(-np.multiply.outer(t, params.gamma))
    # sum_j w[k, j] / gamma[j] == 1 for every k, so this is 1 - F_k exactly
    return e @ w.T


def branch_cdf(params: CoxianParams, t):
    t = _check_t(t)
    w = branch_weights(params.gamma) / params.gamma[None, :]
    e = -np.expm1(-np.multiply.outer(t, params.gamma))
    return e @ w.T


def coxian_pdf(params: CoxianParams, t):
    """Density of the Coxian distribution at ``t`` (scalar or array)."""
    f = branch_pdf(params, t) @ params.beta
    f = np.maximum(f, 0.0)
    return float(f) if np.ndim(f) == 0 else f


def coxian_cdf(params: CoxianParams, t):
    F = branch_cdf(params, t) @ params.beta
    F = np.clip(F, 0.0, 1.0)
    return float(F) if np.ndim(F) == 0 else F


def coxian_sf(params: CoxianParams, t):
    """``1 - coxian_cdf``, computed without cancellation in the tail."""
    S = branch_sf(params, t) @ params.beta
    S = np.clip(S, 0.0, 1.0)
    return float(S) if np.ndim(S) == 0 else S


def coxian_mean(params: CoxianParams):
    """Expected absorption time: a mixture of hypoexponential means."""
    return float(params.beta @ np.cumsum(1.0 / params.gamma))


def coxian_quantile(params: CoxianParams, q, tol=1e-10):
    """Time ``t`` with ``coxian_cdf(t) == q``.

    The upper end of the bracket doubles from the mean until the cdf exceeds
    ``q``; the root is then polished with Brent's method.
    """
    q = float(q)
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    hi = coxian_mean(params)
    while coxian_cdf(params, hi) <= q:
        hi *= 2.0
        if not math.isfinite(hi):
            raise DomainError("quantile bracket diverged")
    t = brentq(lambda s: coxian_cdf(params, s) - q, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps,
               maxiter=500)
    # brentq stops on the argument; confirm the residual requirement on the cdf
    if abs(coxian_cdf(params, t) - q) > tol:
        lo, hi = 0.0, hi
        for _ in range(2000):
            t = 0.5 * (lo + hi)
            if coxian_cdf(params, t) < q:
                lo = t
            else:
                hi = t
            if abs(coxian_cdf(params, t) - q) <= tol or hi - lo <= 0:
                break
    return t


def coxian_sample(params: CoxianParams, rng: np.random.Generator, size=None):
    """Draw absorption times: pick branch ``k`` with probability ``beta[k]``,
    then add exponentials with rates ``gamma[0..k]``."""
    m = 1 if size is None else int(np.prod(size))
    k = np.searchsorted(np.cumsum(params.beta), rng.random(m), side="right")
    k = np.minimum(k, params.n - 1)
    stages = rng.standard_exponential((m, params.n)) / params.gamma
    used = np.arange(params.n)[None, :] <= k[:, None]
    out = np.where(used, stages, 0.0).sum(axis=1)
    if size is None:
        return float(out[0])
    return out.reshape(size)


def passive_posterior(params: CoxianParams, t):
    """Probability that a two-phase client took the slow branch, given no return by ``t``."""
    if params.n != 2:
        raise UnsupportedOrderError("passive_posterior needs a two-phase model")
    sf = branch_sf(params, t)
    total = sf @ params.beta
    if np.any(total < TINY):
        raise TailUnderflowError(f"survival probability underflows at t={t}")
    post = params.beta[1] * sf[..., 1] / total
    post = np.clip(post, 0.0, 1.0)
    return float(post) if np.ndim(post) == 0 else post


def q_to_beta(q):
    """Conditional exit probabilities of the serial chain to mixture weights."""
    q = np.asarray(q, dtype=float)
    if np.any((q < 0) | (q > 1)):
        raise DomainError("q entries must lie in [0, 1]")
    if q[-1] != 1.0:
        raise DomainError(f"last exit probability must equal 1, got {q[-1]}")
    survive = np.concatenate(([1.0], np.cumprod(1.0 - q[:-1])))
    return q * survive


def beta_to_q(beta, degenerate_tol=1e-14):
    """Inverse of :func:`q_to_beta`; 0/0 terms are set to 1."""
    beta = np.asarray(beta, dtype=float)
    remaining = 1.0 - np.concatenate(([0.0], np.cumsum(beta[:-1])))
    q = np.empty_like(beta)
    for i, (b, r) in enumerate(zip(beta, remaining)):
        if r < degenerate_tol:
            if b > degenerate_tol:
                raise DomainError(f"degenerate tail at phase {i + 1}: beta={b}, remaining mass={r}")
            q[i] = 1.0
        else:
            q[i] = min(b / r, 1.0)
    q[-1] = 1.0
    return q


# ---------------------------------------------------------------------------
# general phase-type via matrix exponential


@dataclass(frozen=True)
class GeneratorMatrix:
    alpha: np.ndarray
    Q: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        Q = np.atleast_2d(np.array(self.Q, dtype=float))
        a = np.array(self.a, dtype=float).reshape(-1)
        for arr in (alpha, Q, a):
            if not np.all(np.isfinite(arr)):
                raise DomainError("generator entries must be finite")
        n = Q.shape[0]
        if Q.shape != (n, n) or alpha.shape != (n,) or a.shape != (n,):
            raise DomainError("inconsistent generator dimensions")
        off = Q - np.diag(np.diag(Q))
        if np.any(off < 0) or np.any(a < 0) or np.any(alpha < 0):
            raise ParameterDomainError("off-diagonal rates, exit rates and alpha must be nonnegative")
        if abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
            raise ParameterDomainError("alpha must sum to 1")
        scale = max(1.0, float(np.abs(Q).max()))
        if np.any(np.abs(Q.sum(axis=1) + a) > 1e-12 * scale):
            raise ParameterDomainError("rows of [a | Q] must sum to zero")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "a", a)

    @classmethod
    def from_coxian(cls, params: CoxianParams):
        """Serial chain started in phase 1: leave phase ``i`` at rate ``gamma[i]``,
        absorbing with probability ``q[i]`` and moving on otherwise."""
        n = params.n
        q = beta_to_q(params.beta)
        Q = np.diag(-params.gamma)
        for i in range(n - 1):
            Q[i, i + 1] = params.gamma[i] * (1.0 - q[i])
        a = params.gamma * q
        alpha = np.zeros(n)
        alpha[0] = 1.0
        return cls(alpha, Q, a)


def expm(A, min_terms=12):
    """Matrix exponential by scaling and squaring with a truncated Taylor series.

    ``A`` is scaled by ``2**-s`` so that its 1-norm is at most 0.5; the series
    then runs until the terms stop contributing (at least ``min_terms``).
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise DomainError("matrix has non-finite entries")
    norm = np.abs(A).sum(axis=0).max() if A.size else 0.0
    s = 0 if norm <= 0.5 else int(math.ceil(math.log2(norm / 0.5)))
    B = A / (2.0 ** s)
    E = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    k = 0
    while True:
        k += 1
        term = term @ B / k
        E = E + term
        if k >= min_terms and np.abs(term).max() <= np.finfo(float).eps * np.abs(E).max():
            break
        if k > 200:
            break
    for _ in range(s):
        E = E @ E
    return E


def general_ph_pdf(gen: GeneratorMatrix, t):
    """Density ``alpha @ expm(Q t) @ a``."""
    t = float(t)
    if not math.isfinite(t) or t < 0:
        raise DomainError("time must be finite and nonnegative")
    return float(gen.alpha @ expm(gen.Q * t) @ gen.a)


def general_ph_cdf(gen: GeneratorMatrix, t, method="integral"):
    """Distribution function of a general phase-type variable.

    ``method="integral"`` integrates the density, ``alpha @ int_0^t expm(Q s) ds @ a``,
    through the exponential of the augmented matrix ``[[Q, a], [0, 0]]``.
    ``method="survival"`` evaluates ``1 - alpha @ expm(Q t) @ 1``.
    """
    t = float(t)
    if not math.isfinite(t) or t < 0:
        raise DomainError("time must be finite and nonnegative")
    n = gen.Q.shape[0]
    if method == "survival":
        return float(1.0 - gen.alpha @ expm(gen.Q * t) @ np.ones(n))
    if method != "integral":
        raise ValueError(f"unknown method {method!r}")
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = gen.Q
    M[:n, n] = gen.a
    return float(gen.alpha @ expm(M * t)[:n, n])
