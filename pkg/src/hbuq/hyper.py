"""MAP estimation of the hyper distribution N(mu0, Sigma00).

Each segment contributes its Gaussian summary ``N(theta_i | theta_hat_i,
Sigma_i)``. Integrating theta_i against the hyper distribution gives the
negative log marginal posterior (uniform hyper prior, constant dropped)

    L(mu0, Sigma00) = 1/2 sum_i ln|Sigma00 + Sigma_i|
                    + 1/2 sum_i (mu0 - theta_hat_i)' (Sigma00 + Sigma_i)^-1 (mu0 - theta_hat_i)

For fixed Sigma00 the minimizing mean is a matrix-weighted average of the
theta_hat_i, so the optimizer only searches over Sigma00, encoded by a
log-Cholesky factor to stay positive definite.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import NonConvergence, NotPositiveDefinite, TooFewSegments
from .optim import minimize_bfgs

SegmentSummary = namedtuple("SegmentSummary", ["theta", "cov_theta"])


@dataclass
class HyperParameters:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))

    @property
    def std(self):
        return np.sqrt(np.diag(self.cov))

    @property
    def corr(self):
        s = self.std
        return self.cov / np.outer(s, s)

    def to_dict(self, names=None):
        d = {
            "mean": self.mean.tolist(),
            "cov": self.cov.reshape(-1).tolist(),
            "std": self.std.tolist(),
            "corr": self.corr.reshape(-1).tolist(),
        }
        if names is not None:
            d["names"] = list(names)
        return d

    @classmethod
    def from_dict(cls, d):
        mean = np.asarray(d["mean"], dtype=float)
        return cls(mean, np.asarray(d["cov"], dtype=float).reshape(mean.size, mean.size))


def _stack(posteriors):
    thetas = np.array([np.atleast_1d(p.theta) for p in posteriors], dtype=float)
    covs = np.array([np.atleast_2d(p.cov_theta) for p in posteriors], dtype=float)
    return thetas, covs


def _chol(A):
    try:
        return linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefinite("matrix is not positive definite") from None


def _check_spd(S):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not np.allclose(S, S.T, rtol=1e-10, atol=0):
        raise NotPositiveDefinite("covariance must be symmetric")
    _chol(S)
    return S


def _inverses(Sigma00, covs):
    out = np.empty_like(covs)
    logdets = np.empty(covs.shape[0])
    I = np.eye(Sigma00.shape[0])
    for i, C in enumerate(covs):
        c = _chol(Sigma00 + C)
        out[i] = linalg.cho_solve(c, I)
        logdets[i] = 2 * np.sum(np.log(np.diag(c[0])))
    return out, logdets


def hyper_neg_log_posterior(mu0, Sigma00, posteriors):
    thetas, covs = _stack(posteriors)
    Sigma00 = _check_spd(Sigma00)
    inv, logdets = _inverses(Sigma00, covs)
    r = np.atleast_1d(mu0) - thetas
    quad = np.einsum("ij,ijk,ik->", r, inv, r)
    return 0.5 * float(np.sum(logdets)) + 0.5 * float(quad)


def hyper_gradient(mu0, Sigma00, posteriors):
    """Gradients w.r.t. ``mu0`` and ``Sigma00`` (entries treated as free)."""
    thetas, covs = _stack(posteriors)
    Sigma00 = _check_spd(Sigma00)
    inv, _ = _inverses(Sigma00, covs)
    r = np.atleast_1d(mu0) - thetas
    w = np.einsum("ijk,ik->ij", inv, r)
    g_mu = w.sum(axis=0)
    g_S = 0.5 * (inv.sum(axis=0) - np.einsum("ij,ik->jk", w, w))
    return g_mu, 0.5 * (g_S + g_S.T)


def profile_weights(Sigma00, posteriors):
    """Weight matrices ``Lambda_i`` of the optimal mean; they sum to I."""
    _, covs = _stack(posteriors)
    Sigma00 = _check_spd(Sigma00)
    inv, _ = _inverses(Sigma00, covs)
    total = inv.sum(axis=0)
    return np.array([linalg.solve(total, A, assume_a="pos") for A in inv])


def profile_mu(Sigma00, posteriors):
    """Mean minimizing L for fixed ``Sigma00``."""
    thetas, covs = _stack(posteriors)
    Sigma00 = _check_spd(Sigma00)
    inv, _ = _inverses(Sigma00, covs)
    total = inv.sum(axis=0)
    rhs = np.einsum("ijk,ik->j", inv, thetas)
    return linalg.solve(total, rhs, assume_a="pos")


def eigen_floor(A, tau):
    w, V = linalg.eigh(0.5 * (A + A.T))
    w = np.maximum(w, tau)
    return (V * w) @ V.T


def reference_covariance(posteriors, reference_index=None):
    """Covariance standing in for every segment in the closed-form start.

    Uses segment ``reference_index`` if given; otherwise the element-wise
    median of the standard deviations combined with the median correlations.
    """
    _, covs = _stack(posteriors)
    if reference_index is not None:
        return covs[reference_index].copy()
    sd = np.sqrt(np.einsum("ijj->ij", covs))
    corr = covs / (sd[:, :, None] * sd[:, None, :])
    s = np.median(sd, axis=0)
    R = np.median(corr, axis=0)
    np.fill_diagonal(R, 1.0)
    return R * np.outer(s, s)


def init_hyper(posteriors, reference_index=None):
    """Closed-form start assuming equal segment covariances.

    Mean is the average of the MAP points; covariance is their scatter about
    that mean minus the reference segment covariance, with eigenvalues raised
    to ``1e-10 * max(trace(scatter), 1)``.
    """
    if len(posteriors) < 2:
        raise TooFewSegments("at least two segments are required")
    thetas, _ = _stack(posteriors)
    mu = thetas.mean(axis=0)
    r = thetas - mu
    scatter = r.T @ r / thetas.shape[0]
    raw = scatter - reference_covariance(posteriors, reference_index)
    tau = 1e-10 * max(np.trace(scatter), 1.0)
    return mu, eigen_floor(raw, tau)


# -- log-Cholesky encoding ---------------------------------------------------

def encode_cholesky(Sigma):
    L = linalg.cholesky(Sigma, lower=True)
    d = Sigma.shape[0]
    il = np.tril_indices(d)
    L = L.copy()
    L[np.diag_indices(d)] = np.log(np.diag(L))
    return L[il]


def decode_cholesky(z, d):
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = z
    L[np.diag_indices(d)] = np.exp(np.diag(L))
    return L


def _chain_cholesky(G, L):
    """Gradient w.r.t. the log-Cholesky vector from a symmetric ``dL/dSigma``."""
    d = L.shape[0]
    gL = 2 * np.tril(G @ L)
    gL[np.diag_indices(d)] *= np.diag(L)
    return gL[np.tril_indices(d)]


@dataclass
class HyperFit:
    params: HyperParameters
    initial: HyperParameters
    objective: float
    converged: bool
    n_iter: int
    grad_norm: float
    message: str
    trace: list = field(default_factory=list)

    @property
    def mean(self):
        return self.params.mean

    @property
    def cov(self):
        return self.params.cov


def optimize_hyper(posteriors, init=None, *, reference_index=None, gtol=1e-8,
                   max_iterations=1000, raise_on_failure=False):
    """MAP hyper-parameters with the mean profiled out.

    The search runs on standardized parameters (centered on the MAP-point
    average, scaled per component), which changes L only by a constant.
    ``init`` is an optional ``(mu0, Sigma00)`` start; otherwise
    :func:`init_hyper` supplies it.
    """
    if len(posteriors) < 2:
        raise TooFewSegments("at least two segments are required")
    thetas, covs = _stack(posteriors)
    d = thetas.shape[1]
    mu_init, S_init = init if init is not None else init_hyper(posteriors, reference_index)
    S_init = _check_spd(S_init)

    center = thetas.mean(axis=0)
    r = thetas - center
    scale = np.sqrt(np.diag(r.T @ r) / len(thetas) + np.diag(covs.mean(axis=0)))
    z_thetas = r / scale
    z_covs = covs / np.outer(scale, scale)
    z_post = [SegmentSummary(t, c) for t, c in zip(z_thetas, z_covs)]
    z0 = encode_cholesky(S_init / np.outer(scale, scale))

    def fun(z):
        L = decode_cholesky(z, d)
        S = L @ L.T
        mu = profile_mu(S, z_post)
        value = hyper_neg_log_posterior(mu, S, z_post)
        _, G = hyper_gradient(mu, S, z_post)
        return value, _chain_cholesky(G, L)

    res = minimize_bfgs(fun, z0, gtol=gtol, xtol=0.0, max_iter=max_iterations,
                        infeasible=(ValueError, ArithmeticError, linalg.LinAlgError))
    L = decode_cholesky(res.x, d)
    S_z = L @ L.T
    mu = center + scale * profile_mu(S_z, z_post)
    Sigma = S_z * np.outer(scale, scale)
    Sigma = 0.5 * (Sigma + Sigma.T)
    fit = HyperFit(
        HyperParameters(mu, Sigma),
        HyperParameters(mu_init, S_init),
        hyper_neg_log_posterior(mu, Sigma, posteriors),
        res.converged, res.n_iter, float(np.max(np.abs(res.grad))), res.message, res.trace,
    )
    if raise_on_failure and not res.converged:
        raise NonConvergence(f"hyper optimization did not converge ({res.message})", result=fit)
    return fit
