"""Propagation of the hyper distribution to predicted responses.

Parameters for a new event are drawn from the calibrated Gaussian, each draw
is simulated under the new input, and the responses are summarized by their
mean and per-step covariance. Prediction errors follow a Student-t law with
``2 * alpha0`` degrees of freedom and squared scale ``beta0 / alpha0``, so
each channel's error variance is ``beta0 / (alpha0 - 1)``.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from .errors import ExcessiveRejection, ImproperDensity, InvalidConfig, NotPositiveDefinite
from .model import QUANTITIES, simulate

# samples per reduction block; fixed so results do not depend on worker count
CHUNK = 64


@dataclass
class PredictionConfig:
    alpha0: float = 2.0
    beta0: float = 0.0
    n_samples: int = 2000
    seed: int = 0
    duration: float = 50.0
    level: float = 0.99

    def validate(self):
        if not self.alpha0 > 1:
            raise InvalidConfig("alpha0 must exceed 1 for a finite predictive variance")
        if not self.beta0 >= 0:
            raise InvalidConfig("beta0 must be non-negative")
        if int(self.n_samples) < 1:
            raise InvalidConfig("n_samples must be at least 1")
        if not self.duration > 0:
            raise InvalidConfig("duration must be positive")
        if not 0 < self.level < 1:
            raise InvalidConfig("level must lie in (0, 1)")
        return self

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    def to_dict(self):
        return dict(alpha0=self.alpha0, beta0=self.beta0, n_samples=self.n_samples,
                    seed=self.seed, duration=self.duration, level=self.level)


@dataclass
class ParameterSamples:
    theta: np.ndarray
    rejected: int
    seed: int

    def __len__(self):
        return self.theta.shape[0]


def sample_parameters(hyper, n_samples, seed, spec=None):
    """Draw ``n_samples`` parameter vectors from ``N(hyper.mean, hyper.cov)``.

    Draws infeasible for ``spec`` are discarded and replaced. Raises
    :class:`ExcessiveRejection` once more than half of all draws are rejected.
    """
    n_samples = int(n_samples)
    if n_samples < 1:
        raise InvalidConfig("n_samples must be at least 1")
    try:
        L = linalg.cholesky(hyper.cov, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefinite("hyper covariance is not positive definite") from None
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    kept = []
    n_kept = rejected = 0
    need = n_samples
    while need > 0:
        draws = hyper.mean + rng.standard_normal((need, hyper.mean.size)) @ L.T
        if spec is not None:
            ok = np.array([spec.is_feasible(t) for t in draws], dtype=bool)
        else:
            ok = np.ones(need, dtype=bool)
        kept.append(draws[ok])
        n_kept += int(ok.sum())
        rejected += int((~ok).sum())
        if rejected > 0.5 * (n_kept + rejected):
            raise ExcessiveRejection(
                f"{rejected} of {n_kept + rejected} parameter draws were infeasible")
        need = n_samples - n_kept
    return ParameterSamples(np.concatenate(kept)[:n_samples], rejected, seed)


def noise_variance(alpha0, beta0):
    """Variance of the Student-t prediction error, ``2a/(2a-2) * b/a``."""
    return (2 * alpha0 / (2 * alpha0 - 2)) * (beta0 / alpha0)


@dataclass
class PredictiveSummary:
    dt: float
    mean: dict
    cov: dict
    n_samples: int
    alpha0: float
    beta0: float
    rejected: int = 0
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n(self):
        return next(iter(self.mean.values())).shape[1]

    @property
    def time(self):
        return self.dt * np.arange(self.n)

    def variance(self, quantity):
        """Per-channel variances, shape (channels, n)."""
        return np.einsum("kjj->jk", self.cov[quantity])


def _chunk_stats(thetas, spec, psi, u, dt, n, quantities):
    """Mean and centered scatter of the responses in one block of samples."""
    resp = {q: [] for q in quantities}
    for theta in thetas:
        h = simulate(spec, theta, psi, u, dt, n)
        for q in quantities:
            resp[q].append(h.quantity(q))
    out = {}
    for q in quantities:
        X = np.array(resp[q])                       # (m, d, n)
        mu = X.mean(axis=0)
        R = X - mu
        out[q] = (len(thetas), mu, np.einsum("mjk,mik->kji", R, R))
    return out


def _merge(a, b):
    na, ma, Ma = a
    nb, mb, Mb = b
    n = na + nb
    delta = mb - ma
    mean = ma + delta * (nb / n)
    M = Ma + Mb + np.einsum("jk,ik->kji", delta, delta) * (na * nb / n)
    return n, mean, M


def predictive_moments(samples, spec, psi, u, dt, n, alpha0, beta0, *,
                       quantities=QUANTITIES, workers=1):
    """Mean and per-step covariance of the predicted responses.

    The covariance is the sample covariance of the simulated responses
    (normalized by the number of samples) plus ``noise_variance * I``.
    Blocks of :data:`CHUNK` samples are reduced in index order, so the result
    is bitwise independent of ``workers``.
    """
    if not alpha0 > 1:
        raise InvalidConfig("alpha0 must exceed 1")
    if not beta0 >= 0:
        raise InvalidConfig("beta0 must be non-negative")
    thetas = samples.theta if isinstance(samples, ParameterSamples) else np.atleast_2d(samples)
    chunks = [thetas[i:i + CHUNK] for i in range(0, len(thetas), CHUNK)]
    args = (spec, psi, u, dt, n, tuple(quantities))
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_stats, chunks, *[[a] * len(chunks) for a in args]))
    else:
        parts = [_chunk_stats(c, *args) for c in chunks]
    total = parts[0]
    for p in parts[1:]:
        total = {q: _merge(total[q], p[q]) for q in quantities}
    noise = noise_variance(alpha0, beta0)
    mean, cov = {}, {}
    for q in quantities:
        count, mu, M = total[q]
        C = M / count
        C = 0.5 * (C + np.swapaxes(C, 1, 2))
        if noise:
            C = C + noise * np.eye(C.shape[1])
        mean[q] = mu
        cov[q] = C
    return PredictiveSummary(
        dt, mean, cov, len(thetas), alpha0, beta0,
        rejected=getattr(samples, "rejected", 0), seed=getattr(samples, "seed", None),
    )


def predictive_density(w, k, samples, spec, psi, u, dt, alpha0, beta0,
                       quantity="displacement"):
    """Mixture-of-Student-t density of the response vector ``w`` at step ``k``."""
    if not beta0 > 0:
        raise ImproperDensity("the predictive density needs beta0 > 0")
    if not alpha0 > 1:
        raise InvalidConfig("alpha0 must exceed 1")
    thetas = samples.theta if isinstance(samples, ParameterSamples) else np.atleast_2d(samples)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    scale = np.sqrt(beta0 / alpha0)
    u = np.asarray(u, dtype=float)[..., :k + 1]
    logs = np.empty(len(thetas))
    for m, theta in enumerate(thetas):
        x = simulate(spec, theta, psi, u, dt, k + 1).quantity(quantity)[:, k]
        logs[m] = stats.t.logpdf(w, df=2 * alpha0, loc=x, scale=scale).sum()
    return float(np.exp(logsumexp(logs) - np.log(len(thetas))))


def band_multiplier(level):
    if not 0 < level < 1:
        raise InvalidConfig("level must lie in (0, 1)")
    return stats.norm.ppf(0.5 * (1 + level))


def credible_band(summary, level):
    """Gaussian ``mean +- z * std`` bands for each quantity, as ``(lo, hi)``."""
    z = band_multiplier(level)
    out = {}
    for q, mu in summary.mean.items():
        sd = np.sqrt(np.maximum(summary.variance(q), 0.0))
        out[q] = (mu - z * sd, mu + z * sd)
    return out


def write_prediction(summary, out_dir, level, prefix="prediction"):
    """Write one ``t, ch, mean, var, lo, hi`` CSV per quantity plus JSON metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bands = credible_band(summary, level)
    t = summary.time
    paths = {}
    for q, mu in summary.mean.items():
        var = summary.variance(q)
        lo, hi = bands[q]
        path = out_dir / f"{prefix}_{q}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "ch", "mean", "var", "lo", "hi"])
            for k in range(summary.n):
                for j in range(mu.shape[0]):
                    w.writerow([f"{t[k]:.17g}", j, f"{mu[j, k]:.17g}", f"{var[j, k]:.17g}",
                                f"{lo[j, k]:.17g}", f"{hi[j, k]:.17g}"])
        paths[q] = path
    meta = dict(alpha0=summary.alpha0, beta0=summary.beta0, n_samples=summary.n_samples,
                seed=summary.seed, rejected=summary.rejected, level=level, dt=summary.dt,
                **summary.metadata)
    with open(out_dir / f"{prefix}_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return paths


def read_prediction_csv(path):
    """Load a prediction CSV as arrays ``t, mean, var, lo, hi`` of shape (channels, n)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ch = data[:, 1].astype(int)
    n_ch = ch.max() + 1
    cols = {name: data[:, i].reshape(-1, n_ch).T for i, name in
            enumerate(["t", "ch", "mean", "var", "lo", "hi"]) if name != "ch"}
    cols["t"] = cols["t"][0]
    return cols
