"""Limited-memory BFGS ascent with a backtracking line search.

Only accepted iterates enter the trace, and a step is accepted only if it
satisfies the Armijo condition, so the trace never decreases.  Non-finite
objective values are treated as failed trial points and the step is halved.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AscentResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    message: str = ""


def lbfgs_ascent(fun_grad, x0, max_iters=500, tol=1e-8, grad_tol=1e-6, memory=10,
                 patience=3, armijo=1e-4, max_halvings=60, callback=None):
    """Maximize ``fun_grad(x) -> (value, gradient)`` starting from ``x0``.

    Stops when the relative improvement stays below ``tol`` for ``patience``
    consecutive iterations, when the gradient infinity-norm drops below
    ``grad_tol``, or when no step along the search direction improves the
    objective (a stationary point to working precision).
    """
    x = np.array(x0, dtype=float, copy=True)
    f, g = fun_grad(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return AscentResult(x, f, g, [f], False, 0, "non-finite objective at the starting point")
    trace = [float(f)]
    hist = deque(maxlen=memory)
    small = 0
    for it in range(1, max_iters + 1):
        if np.max(np.abs(g)) < grad_tol:
            return AscentResult(x, f, g, trace, True, it - 1, "gradient below tolerance")
        # two-loop recursion on the negated problem; d is an ascent direction
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(hist):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if hist:
            s, y, _ = hist[-1]
            q *= (s @ y) / (y @ y)
        else:
            q *= 1.0 / max(1.0, np.max(np.abs(g)))
        for (s, y, rho), a in zip(hist, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = q
        slope = g @ d
        if not slope > 0:
            hist.clear()
            d = g / max(1.0, np.max(np.abs(g)))
            slope = g @ d
        step = 1.0
        accepted = False
        for _ in range(max_halvings):
            x_new = x + step * d
            f_new, g_new = fun_grad(x_new)
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)) and f_new >= f + armijo * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            msg = "line search found no improvement"
            return AscentResult(x, f, g, trace, True, it - 1, msg)
        s = x_new - x
        y = g - g_new  # gradient of the negated objective changes by -(g_new - g)
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            hist.append((s, y, 1.0 / sy))
        rel = (f_new - f) / max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        trace.append(float(f))
        if callback is not None:
            callback(x, f)
        small = small + 1 if rel < tol else 0
        if small >= patience:
            return AscentResult(x, f, g, trace, True, it, "relative improvement below tolerance")
    return AscentResult(x, f, g, trace, False, max_iters, "iteration limit reached")


def check_gradient(objective, point, h=1e-5, grad=None):
    """Worst relative error of a gradient against central differences.

    ``objective(x)`` returns either a value or ``(value, gradient)``; a
    separate ``grad`` callable may be given instead.  The error of each
    coordinate is ``|g_i - fd_i| / max(|fd_i|, floor)`` with
    ``floor = sqrt(eps) * max(1, |f|)``.
    """
    point = np.array(point, dtype=float, copy=True)

    def value(x):
        out = objective(x)
        return out[0] if isinstance(out, tuple) else out

    out = objective(point)
    if isinstance(out, tuple):
        f0, g = out
    else:
        f0, g = out, grad(point)
    g = np.asarray(g, dtype=float)
    if not np.isfinite(f0):
        raise ValueError("objective is not finite at the base point")
    floor = np.sqrt(np.finfo(float).eps) * max(1.0, abs(f0))
    worst = 0.0
    for i in range(point.size):
        e = np.zeros_like(point)
        e[i] = h
        fp, fm = value(point + e), value(point - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"objective not finite when perturbing coordinate {i}")
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(abs(fd), floor))
    return worst
