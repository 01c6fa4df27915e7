"""BFGS with a backtracking Armijo line search.

Used for both the per-segment MAP problems and the hyper-parameter problem.
Trial points where the objective raises or returns a non-finite value are
treated as infinitely bad, which lets callers keep feasibility implicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ARMIJO = 1e-4
_ROUNDOFF = 1e-12


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    converged: bool
    n_iter: int
    message: str
    trace: list = field(default_factory=list)


def _safe_eval(fun, x, exceptions):
    try:
        f, g = fun(x)
    except exceptions:
        return np.inf, None
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return np.inf, None
    return f, g


def minimize_bfgs(fun, x0, *, h0=None, gtol=1e-8, xtol=1e-10, max_iter=500,
                  f_noise=None, metric=None, infeasible=(ValueError, ArithmeticError)):
    """Minimize ``fun(x) -> (f, grad)``.

    Stops when ``max|grad| < gtol * (1 + |f|)``, when the quasi-Newton step
    ``-H grad`` has Euclidean norm below ``xtol``, or when no step can be
    smaller than ``f_noise``, the absolute noise level of the objective
    (default ``1e-12 * (1 + |f|)``). ``h0`` is the initial inverse-Hessian
    approximation (identity by default); supplying a good one (e.g. an
    inverse Gauss-Newton matrix) fixes the scaling of the problem. If
    ``metric(x)`` is given it supplies a fresh inverse-Hessian approximation
    at every accepted point (variable-metric Gauss-Newton); when it returns
    None the BFGS update is used for that step instead.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    n = x.size
    H0 = np.eye(n) if h0 is None else np.array(h0, dtype=float)
    H = H0.copy()
    trace = [float(f)]
    resets = 0
    for it in range(max_iter):
        if np.max(np.abs(g)) < gtol * (1 + abs(f)):
            return OptimizeResult(x, f, g, True, it, "gradient tolerance met", trace)
        d = -H @ g
        slope = g @ d
        if not slope < 0:
            H = H0.copy()
            d = -H @ g
            slope = g @ d
        if np.linalg.norm(d) < xtol:
            return OptimizeResult(x, f, g, True, it, "step tolerance met", trace)
        noise = _ROUNDOFF * (1 + abs(f)) if f_noise is None else f_noise
        if -0.5 * slope < noise:
            return OptimizeResult(x, f, g, True, it, "predicted decrease below noise level", trace)
        t = 1.0
        while True:
            xn = x + t * d
            fn, gn = _safe_eval(fun, xn, infeasible)
            if fn <= f + _ARMIJO * t * slope:
                break
            t *= 0.5
            if t < 1e-16:
                break
        if fn > f + _ARMIJO * t * slope or gn is None:
            # no acceptable step along d; retry from the initial metric
            if resets < 2 and not np.allclose(H, H0):
                H = H0.copy()
                resets += 1
                continue
            return OptimizeResult(x, f, g, False, it, "line search failed", trace)
        s = xn - x
        y = gn - g
        sy = s @ y
        Hm = metric(xn) if metric is not None else None
        if Hm is not None:
            H = Hm
        elif sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * (y @ Hy) + rho) * np.outer(s, s)
        x, f, g = xn, fn, gn
        trace.append(float(f))
    converged = np.max(np.abs(g)) < gtol * (1 + abs(f))
    return OptimizeResult(x, f, g, bool(converged), max_iter, "maximum iterations reached", trace)
