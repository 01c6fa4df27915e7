"""Per-segment MAP inference and Laplace summaries.

The prediction-error variances of every channel are integrated out under a
Jeffreys prior, which leaves the objective

    L(theta, psi) = (n / 2) * sum_j ln S_j,   S_j = sum_k eps_j[k]^2

with the additive constant fixed to zero. Initial conditions ``psi`` carry a
uniform prior and are removed afterwards by Gaussian marginalization of the
Laplace approximation (a Schur complement of the Hessian).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import (
    DegenerateFit,
    IndefiniteHessian,
    InfeasibleStart,
    NonConvergence,
    NonPositiveDefinite,
    SingularBlock,
)
from .model import response_sensitivities, simulate
from .optim import OptimizeResult, minimize_bfgs

# absolute noise of the objective per sample and channel (propagation roundoff)
_NOISE_PER_SAMPLE = 1e-10
_POLISH_STEPS = 20


def _observed(segment, response):
    q = response.quantity(segment.quantity)
    return q[list(segment.sensor_map)]


def _split(spec, p):
    p = np.asarray(p, dtype=float)
    return p[: spec.n_theta], p[spec.n_theta:]


def prediction_errors(segment, spec, theta, psi):
    """``Y - S_o X(theta, psi)`` as an (N_o, n) array."""
    resp = simulate(spec, theta, psi, segment.inputs, segment.dt, segment.n)
    return segment.outputs - _observed(segment, resp)


def _floors(segment):
    n = segment.n
    return np.finfo(float).eps * n * np.var(segment.outputs, axis=1)


def _sums(segment, eps):
    S = np.sum(eps * eps, axis=1)
    bad = S <= _floors(segment)
    if np.any(bad):
        raise DegenerateFit(f"residual sum of squares hit the floor on channel(s) {np.flatnonzero(bad).tolist()}")
    return S


def segment_neg_log_likelihood(segment, spec, theta, psi):
    eps = prediction_errors(segment, spec, theta, psi)
    return 0.5 * segment.n * float(np.sum(np.log(_sums(segment, eps))))


@dataclass
class _Evaluation:
    value: float
    grad: np.ndarray
    eps: np.ndarray
    S: np.ndarray
    J: np.ndarray  # (n_params, N_o, n)


def _evaluate(segment, spec, theta, psi):
    sens = response_sensitivities(spec, theta, psi, segment.inputs, segment.dt, segment.n)
    eps = segment.outputs - _observed(segment, sens.response)
    S = _sums(segment, eps)
    J = sens.quantity(segment.quantity)[:, list(segment.sensor_map), :]
    n = segment.n
    value = 0.5 * n * float(np.sum(np.log(S)))
    grad = -np.einsum("j,pjk,jk->p", n / S, J, eps)
    return _Evaluation(value, grad, eps, S, J)


def segment_gradient(segment, spec, theta, psi):
    """Gradient of the segment objective over ``[theta, psi]``."""
    return _evaluate(segment, spec, theta, psi).grad


def _gauss_newton(ev, n, with_rank_one=True):
    H = np.zeros((ev.J.shape[0],) * 2)
    for j, S in enumerate(ev.S):
        Jj = ev.J[:, j, :]
        H += (n / S) * (Jj @ Jj.T)
        if with_rank_one:
            b = Jj @ ev.eps[j]
            H -= (2 * n / S**2) * np.outer(b, b)
    return 0.5 * (H + H.T)


@dataclass
class OptimizerOptions:
    max_iterations: int = 500
    n_starts: int = 3
    jitter: float = 0.1
    gtol: float = 1e-8
    xtol: float = 1e-10
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MapResult:
    theta: np.ndarray
    psi: np.ndarray
    objective: float
    converged: bool
    n_iter: int
    grad_norm: float
    message: str
    starts: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (theta_hat, psi_hat)
        return iter((self.theta, self.psi))


def fit_initial_conditions(segment, spec, theta):
    """Least-squares initial conditions for fixed ``theta``.

    The response is affine in ``psi``, so this is exact linear regression of
    the zero-IC residual on the unit-IC responses (channels weighted by the
    inverse output spread).
    """
    sens = response_sensitivities(spec, theta, None, segment.inputs, segment.dt, segment.n)
    nt = spec.n_theta
    r = segment.outputs - _observed(segment, sens.response)
    Phi = sens.quantity(segment.quantity)[nt:, list(segment.sensor_map), :]
    w = 1.0 / np.maximum(np.std(segment.outputs, axis=1), np.finfo(float).tiny)
    A = (Phi * w[None, :, None]).reshape(Phi.shape[0], -1).T
    b = (r * w[:, None]).reshape(-1)
    psi, *_ = np.linalg.lstsq(A, b, rcond=None)
    return psi


def _inverse_metric(ev, n):
    G = _gauss_newton(ev, n, with_rank_one=False)
    try:
        Hinv = linalg.pinvh(G)
    except linalg.LinAlgError:
        return None
    return Hinv if np.all(np.isfinite(Hinv)) else None


class _ExactFit(Exception):
    """A trial point reproduced the data to within the residual floor."""

    def __init__(self, p):
        super().__init__("exact fit")
        self.p = p


def _run_start(segment, spec, theta0, psi0, options):
    p0 = np.concatenate([theta0, psi0])
    last = {}

    def fun(p):
        th, ps = _split(spec, p)
        if not spec.is_feasible(th):
            raise NonPositiveDefinite("infeasible parameters")
        try:
            ev = _evaluate(segment, spec, th, ps)
        except DegenerateFit:
            if "x" not in last:
                raise
            raise _ExactFit(p.copy()) from None
        last["x"], last["ev"] = p.copy(), ev
        return ev.value, ev.grad

    def metric(p):
        # the line search always evaluates the accepted point last
        if "x" not in last or not np.array_equal(last["x"], p):
            fun(p)
        return _inverse_metric(last["ev"], segment.n)

    fun(p0)
    f_noise = _NOISE_PER_SAMPLE * segment.n * segment.n_outputs
    try:
        res = minimize_bfgs(
            fun, p0, h0=_inverse_metric(last["ev"], segment.n), gtol=options.gtol,
            xtol=options.xtol, max_iter=options.max_iterations, f_noise=f_noise, metric=metric,
            infeasible=(ValueError, ArithmeticError, linalg.LinAlgError),
        )
    except _ExactFit as hit:
        # the objective is unbounded below here; report the interpolating point
        return OptimizeResult(hit.p, -np.inf, np.zeros_like(hit.p), True, 0,
                              "exact fit: residuals reached the floor")
    if res.converged:
        res = _polish(segment, spec, res, options.gtol, f_noise)
    return res


def _polish(segment, spec, res, gtol, f_noise, max_steps=_POLISH_STEPS):
    """Full Gauss-Newton steps past the point where line searches can no
    longer resolve decreases, kept while the gradient shrinks and the
    objective stays within its noise level."""
    x, f, g = res.x, res.fun, res.grad
    for _ in range(max_steps):
        if np.max(np.abs(g)) < gtol * (1 + abs(f)):
            break
        th, ps = _split(spec, x)
        ev = _evaluate(segment, spec, th, ps)
        try:
            step = linalg.solve(_gauss_newton(ev, segment.n), g, assume_a="sym")
        except (linalg.LinAlgError, ValueError):
            break
        xn = x - step
        th, ps = _split(spec, xn)
        if not spec.is_feasible(th):
            break
        try:
            evn = _evaluate(segment, spec, th, ps)
        except (ValueError, ArithmeticError, linalg.LinAlgError):
            break
        if not (np.max(np.abs(evn.grad)) < np.max(np.abs(g)) and evn.value <= f + f_noise):
            break
        x, f, g = xn, evn.value, evn.grad
        res.trace.append(float(f))
    res.x, res.fun, res.grad = x, f, g
    return res


def map_segment(segment, spec, theta0, psi0=None, options=None):
    """Minimize the segment objective over ``(theta, psi)``.

    Start 0 uses ``theta0`` (and ``psi0`` if given); the remaining
    ``options.n_starts - 1`` starts jitter ``theta0`` by up to
    ``options.jitter`` relative. Starts without a ``psi0`` take the
    least-squares initial conditions. The lowest-objective converged start is
    returned.
    """
    options = options or OptimizerOptions()
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    if theta0.size != spec.n_theta or not spec.is_feasible(theta0):
        raise InfeasibleStart(f"starting parameters {theta0.tolist()} are infeasible")
    rng = np.random.default_rng(options.seed)
    starts = [theta0]
    for _ in range(max(options.n_starts, 1) - 1):
        starts.append(theta0 * (1 + options.jitter * rng.uniform(-1, 1, theta0.size)))
    results = []
    for s, th in enumerate(starts):
        ps = np.asarray(psi0, dtype=float) if (s == 0 and psi0 is not None) else fit_initial_conditions(segment, spec, th)
        try:
            res = _run_start(segment, spec, th, ps, options)
        except (DegenerateFit, ValueError, ArithmeticError, linalg.LinAlgError) as exc:
            results.append((None, str(exc)))
            continue
        results.append((res, res.message))
    ok = [r for r, _ in results if r is not None]
    if not ok:
        raise NonConvergence("all starts failed: " + "; ".join(m for _, m in results))
    conv = [r for r in ok if r.converged]
    best = min(conv or ok, key=lambda r: r.fun)
    th, ps = _split(spec, best.x)
    out = MapResult(th.copy(), ps.copy(), float(best.fun), bool(best.converged), best.n_iter,
                    float(np.max(np.abs(best.grad))), best.message,
                    starts=[None if r is None else float(r.fun) for r, _ in results])
    if not conv:
        raise NonConvergence(f"no start converged ({best.message})", result=out)
    return out


@dataclass
class HessianBlocks:
    full: np.ndarray
    n_theta: int

    @property
    def theta_theta(self):
        return self.full[: self.n_theta, : self.n_theta]

    @property
    def theta_psi(self):
        return self.full[: self.n_theta, self.n_theta:]

    @property
    def psi_psi(self):
        return self.full[self.n_theta:, self.n_theta:]


def _fd_hessian(segment, spec, p, scales):
    n = p.size
    H = np.zeros((n, n))
    for i in range(n):
        h = 1e-3 * scales[i]
        pp, pm = p.copy(), p.copy()
        pp[i] += h
        pm[i] -= h
        gp = segment_gradient(segment, spec, *_split(spec, pp))
        gm = segment_gradient(segment, spec, *_split(spec, pm))
        H[:, i] = (gp - gm) / (2 * h)
    return 0.5 * (H + H.T)


def hessian_segment(segment, spec, theta, psi, method="gauss-newton"):
    """Hessian of the segment objective at ``(theta, psi)``.

    ``gauss-newton`` drops second derivatives of the response;
    ``finite-difference`` differences the analytic gradient with steps of
    1e-3 of the Gauss-Newton standard deviations.
    """
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    ev = _evaluate(segment, spec, theta, psi)
    if method == "gauss-newton":
        H = _gauss_newton(ev, segment.n)
    elif method == "finite-difference":
        G = _gauss_newton(ev, segment.n, with_rank_one=False)
        scales = np.sqrt(np.abs(np.diag(linalg.pinvh(G))))
        p = np.concatenate([theta, psi])
        scales = np.where(scales > 0, scales, 1e-6 * np.maximum(np.abs(p), 1))
        H = _fd_hessian(segment, spec, p, scales)
    else:
        raise ValueError(f"unknown Hessian method {method!r}")
    try:
        linalg.cholesky(H)
    except linalg.LinAlgError:
        raise IndefiniteHessian(f"{method} Hessian is not positive definite") from None
    return HessianBlocks(H, spec.n_theta)


def _scaled_cond(A):
    d = np.sqrt(np.abs(np.diag(A)))
    if np.any(d == 0):
        return np.inf
    return np.linalg.cond(A / np.outer(d, d))


def marginal_theta_covariance(blocks, theta_psi=None, psi_psi=None):
    """Covariance of theta after integrating out psi.

    Accepts a ``HessianBlocks`` or the three blocks ``(H_tt, H_tp, H_pp)``.
    Conditioning is judged on the Jacobi-scaled blocks so the check does not
    depend on parameter units.
    """
    if isinstance(blocks, HessianBlocks):
        Htt, Htp, Hpp = blocks.theta_theta, blocks.theta_psi, blocks.psi_psi
    else:
        Htt, Htp, Hpp = (np.atleast_2d(np.asarray(b, dtype=float)) for b in (blocks, theta_psi, psi_psi))
    if Hpp.size:
        if _scaled_cond(Hpp) > 1e12:
            raise SingularBlock("initial-condition block is numerically singular")
        schur = Htt - Htp @ linalg.solve(Hpp, Htp.T, assume_a="sym")
    else:
        schur = Htt.copy()
    schur = 0.5 * (schur + schur.T)
    if _scaled_cond(schur) > 1e12:
        raise SingularBlock("Schur complement is numerically singular")
    try:
        c = linalg.cho_factor(schur)
    except linalg.LinAlgError:
        raise SingularBlock("Schur complement is not positive definite") from None
    cov = linalg.cho_solve(c, np.eye(schur.shape[0]))
    return 0.5 * (cov + cov.T)


@dataclass
class SegmentPosterior:
    """Gaussian summary of one segment: MAP point and marginal covariance."""

    theta: np.ndarray
    psi: np.ndarray
    hessian: np.ndarray
    cov_theta: np.ndarray
    objective: float
    converged: bool
    n_iter: int = 0
    grad_norm: float = float("nan")
    hessian_method: str = "gauss-newton"

    @property
    def blocks(self):
        return HessianBlocks(self.hessian, self.theta.size)

    def to_dict(self):
        return {
            "theta": self.theta.tolist(),
            "psi": self.psi.tolist(),
            "cov_theta": self.cov_theta.reshape(-1).tolist(),
            "hessian": self.hessian.reshape(-1).tolist(),
            "objective": self.objective,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "grad_norm": self.grad_norm,
            "hessian_method": self.hessian_method,
        }

    @classmethod
    def from_dict(cls, d):
        theta = np.asarray(d["theta"], dtype=float)
        psi = np.asarray(d["psi"], dtype=float)
        nt, npar = theta.size, theta.size + psi.size
        return cls(theta, psi,
                   np.asarray(d["hessian"], dtype=float).reshape(npar, npar),
                   np.asarray(d["cov_theta"], dtype=float).reshape(nt, nt),
                   float(d["objective"]), bool(d["converged"]), int(d.get("n_iter", 0)),
                   float(d.get("grad_norm", float("nan"))), d.get("hessian_method", "gauss-newton"))


def infer_segment(segment, spec, theta0=None, options=None):
    """MAP, Hessian and marginal covariance for one segment.

    Falls back to the finite-difference Hessian when the Gauss-Newton one is
    not positive definite.
    """
    theta0 = spec.nominal_theta() if theta0 is None else theta0
    res = map_segment(segment, spec, theta0, None, options)
    method = "gauss-newton"
    try:
        blocks = hessian_segment(segment, spec, res.theta, res.psi, method)
    except IndefiniteHessian:
        method = "finite-difference"
        blocks = hessian_segment(segment, spec, res.theta, res.psi, method)
    cov = marginal_theta_covariance(blocks)
    return SegmentPosterior(res.theta, res.psi, blocks.full, cov, res.objective, res.converged,
                            res.n_iter, res.grad_norm, method)
