"""Linear structural models.

Assembly of mass/stiffness/damping matrices for a single-degree-of-freedom
oscillator and for an N-story shear building, exact zero-order-hold
discretization, simulation and direct-differentiation response sensitivities.

Samples are indexed k = 0..n-1 with the state at k = 0 equal to the initial
conditions. The input is held constant over each sampling interval.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, signal

from .errors import DimensionMismatch, NonConvergence, NonPositiveDefinite

BASE_ACCELERATION = "base-acceleration"
NODAL_FORCE = "nodal-force"
_EXCITATIONS = (BASE_ACCELERATION, NODAL_FORCE)

QUANTITIES = ("displacement", "velocity", "acceleration")


def _check_excitation(kind):
    if kind not in _EXCITATIONS:
        raise ValueError(f"excitation must be one of {_EXCITATIONS}, got {kind!r}")


@dataclass(frozen=True)
class SdofSpec:
    """Single-degree-of-freedom oscillator parameterized by its frequency.

    The parameter vector is ``[f]`` in Hz; ``K = m (2 pi f)^2`` and
    ``C = 2 zeta m (2 pi f)``.
    """

    nominal_frequency: float
    damping_ratio: float
    mass: float = 1.0
    excitation: str = BASE_ACCELERATION

    def __post_init__(self):
        _check_excitation(self.excitation)
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if not self.nominal_frequency > 0:
            raise ValueError("nominal frequency must be positive")
        if not 0 < self.damping_ratio < 1:
            raise ValueError("damping ratio must lie in (0, 1)")

    @property
    def n_dof(self):
        return 1

    @property
    def n_theta(self):
        return 1

    @property
    def parameter_names(self):
        return ("f",)

    def nominal_theta(self):
        return np.array([self.nominal_frequency])

    def is_feasible(self, theta):
        return bool(np.asarray(theta, dtype=float).reshape(-1)[0] > 0)

    def mass_matrix(self):
        return np.array([[self.mass]])

    def _matrices(self, theta):
        w = 2 * np.pi * theta[0]
        K = np.array([[self.mass * w * w]])
        C = np.array([[2 * self.damping_ratio * self.mass * w]])
        return self.mass_matrix(), K, C

    def _derivatives(self, theta):
        w = 2 * np.pi * theta[0]
        dK = np.array([[2 * self.mass * w * 2 * np.pi]])
        dC = np.array([[2 * self.damping_ratio * self.mass * 2 * np.pi]])
        return [(dK, dC)]

    def to_dict(self):
        return {
            "kind": "sdof",
            "nominal_frequency": self.nominal_frequency,
            "damping_ratio": self.damping_ratio,
            "mass": self.mass,
            "excitation": self.excitation,
        }


@dataclass(frozen=True, eq=False)
class ShearBuildingSpec:
    """N-story shear building with multiplier parameters.

    ``theta[:N]`` scale the story stiffnesses and ``theta[N:]`` scale the
    damping contribution of each nominal mode. Modal data are fixed nominal
    values and are never recomputed from the scaled stiffness.
    """

    masses: np.ndarray
    nominal_stiffness: np.ndarray
    modal_frequencies: np.ndarray
    modal_damping: np.ndarray
    mode_shapes: np.ndarray
    excitation: str = BASE_ACCELERATION

    def __post_init__(self):
        _check_excitation(self.excitation)
        for name in ("masses", "nominal_stiffness", "modal_frequencies", "modal_damping", "mode_shapes"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        n = self.masses.size
        if self.masses.ndim != 1 or n == 0:
            raise DimensionMismatch("masses must be a non-empty vector")
        if self.nominal_stiffness.shape != (n,):
            raise DimensionMismatch("one nominal stiffness per story expected")
        if self.modal_frequencies.shape != (n,) or self.modal_damping.shape != (n,):
            raise DimensionMismatch("one modal frequency and damping ratio per mode expected")
        if self.mode_shapes.shape != (n, n):
            raise DimensionMismatch("mode_shapes must be N x N with modes in columns")
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")
        if np.any(self.nominal_stiffness <= 0):
            raise ValueError("nominal stiffnesses must be positive")
        if np.any(self.modal_frequencies <= 0):
            raise ValueError("modal frequencies must be positive")
        if np.any((self.modal_damping <= 0) | (self.modal_damping >= 1)):
            raise ValueError("modal damping ratios must lie in (0, 1)")
        G = self.mode_shapes.T @ np.diag(self.masses) @ self.mode_shapes
        d = np.sqrt(np.abs(np.diag(G)))
        off = G - np.diag(np.diag(G))
        if np.any(np.abs(off) > 1e-8 * np.outer(d, d)):
            raise ValueError("mode shapes are not mass-orthogonal")

    @classmethod
    def from_nominal(cls, masses, stiffness, damping_ratios, frequencies=None,
                     excitation=BASE_ACCELERATION):
        """Build a spec whose mode shapes come from the nominal K and M.

        ``frequencies`` overrides the modal frequencies used in the damping
        model (e.g. identified values); by default the nominal eigenvalues are
        used.
        """
        masses = np.asarray(masses, dtype=float)
        stiffness = np.asarray(stiffness, dtype=float)
        K = _shear_stiffness(stiffness, np.ones_like(stiffness))
        freqs, shapes = modal_analysis(np.diag(masses), K)
        if frequencies is not None:
            freqs = np.asarray(frequencies, dtype=float)
        return cls(masses, stiffness, freqs, np.asarray(damping_ratios, dtype=float), shapes, excitation)

    @property
    def n_dof(self):
        return self.masses.size

    @property
    def n_theta(self):
        return 2 * self.masses.size

    @property
    def parameter_names(self):
        n = self.n_dof
        return tuple(f"k{i + 1}" for i in range(n)) + tuple(f"c{i + 1}" for i in range(n))

    def nominal_theta(self):
        return np.ones(self.n_theta)

    def is_feasible(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        return bool(np.all(theta[: self.n_dof] > 0))

    def mass_matrix(self):
        return np.diag(self.masses)

    def _damping_dyads(self):
        M = self.mass_matrix()
        dyads = []
        for r in range(self.n_dof):
            phi = self.mode_shapes[:, r]
            Mphi = M @ phi
            coef = 4 * np.pi * self.modal_frequencies[r] * self.modal_damping[r]
            dyads.append(coef * np.outer(Mphi, Mphi) / (phi @ Mphi))
        return dyads

    def _matrices(self, theta):
        n = self.n_dof
        K = _shear_stiffness(self.nominal_stiffness, theta[:n])
        C = sum(t * D for t, D in zip(theta[n:], self._damping_dyads()))
        return self.mass_matrix(), K, C

    def _derivatives(self, theta):
        n = self.n_dof
        zero = np.zeros((n, n))
        out = []
        for s in range(n):
            e = np.zeros(n)
            e[s] = 1.0
            out.append((_shear_stiffness(self.nominal_stiffness, e), zero))
        for D in self._damping_dyads():
            out.append((zero, D))
        return out

    def to_dict(self):
        return {
            "kind": "shear",
            "masses": self.masses.tolist(),
            "nominal_stiffness": self.nominal_stiffness.tolist(),
            "modal_frequencies": self.modal_frequencies.tolist(),
            "modal_damping": self.modal_damping.tolist(),
            "mode_shapes": self.mode_shapes.tolist(),
            "excitation": self.excitation,
        }


def _shear_stiffness(k, mult):
    n = k.size
    ks = k * mult
    K = np.zeros((n, n))
    for s in range(n):
        K[s, s] += ks[s]
        if s > 0:
            K[s - 1, s - 1] += ks[s]
            K[s - 1, s] -= ks[s]
            K[s, s - 1] -= ks[s]
    return K


def spec_from_dict(d):
    """Inverse of ``spec.to_dict()``; shear specs may omit mode shapes."""
    d = dict(d)
    kind = d.pop("kind")
    if kind == "sdof":
        return SdofSpec(**d)
    if kind == "shear":
        if "mode_shapes" in d:
            return ShearBuildingSpec(**d)
        return ShearBuildingSpec.from_nominal(
            d["masses"], d["nominal_stiffness"], d["modal_damping"],
            frequencies=d.get("modal_frequencies"),
            excitation=d.get("excitation", BASE_ACCELERATION),
        )
    raise ValueError(f"unknown model kind {kind!r}")


def three_story_building():
    """Three-story laboratory frame: measured masses, nominal stiffnesses and
    identified modal frequencies/damping (shapes from the nominal model)."""
    return ShearBuildingSpec.from_nominal(
        masses=[5.63, 6.03, 4.66],
        stiffness=[20.88e3, 22.37e3, 24.21e3],
        damping_ratios=[0.0239, 0.0087, 0.0065],
        frequencies=[4.23, 12.78, 18.65],
    )


def _as_theta(spec, theta):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != spec.n_theta:
        raise DimensionMismatch(f"expected {spec.n_theta} parameters, got {theta.size}")
    return theta


def assemble_matrices(spec, theta):
    """Return ``(M, K, C)`` for the parameter vector ``theta``."""
    theta = _as_theta(spec, theta)
    if not spec.is_feasible(theta):
        raise NonPositiveDefinite("stiffness parameters must be positive")
    return spec._matrices(theta)


def modal_analysis(M, K):
    """Natural frequencies (Hz, ascending) and mass-normalized mode shapes.

    Shapes are returned column-wise, signed so that the largest-magnitude
    entry of each is positive.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    try:
        linalg.cholesky(K)
    except linalg.LinAlgError:
        raise NonPositiveDefinite("stiffness matrix is not positive definite") from None
    try:
        w2, phi = linalg.eigh(K, M)
    except linalg.LinAlgError as exc:
        raise NonConvergence(f"generalized eigensolver failed: {exc}") from None
    idx = np.argmax(np.abs(phi), axis=0)
    phi = phi * np.sign(phi[idx, np.arange(phi.shape[1])])
    return np.sqrt(w2) / (2 * np.pi), phi


@dataclass
class StateSpaceModel:
    """Continuous first-order form with state ``[x, v]``.

    Acceleration is ``acc_state @ state + acc_input @ u``; under base
    excitation it is the total acceleration, so ``acc_input`` is zero.
    """

    A: np.ndarray
    B: np.ndarray
    acc_state: np.ndarray
    acc_input: np.ndarray

    @property
    def n_dof(self):
        return self.A.shape[0] // 2


def _state_space(M, K, C, excitation):
    n = M.shape[0]
    Minv = np.linalg.inv(M)
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -Minv @ K
    A[n:, n:] = -Minv @ C
    if excitation == BASE_ACCELERATION:
        B = np.zeros((2 * n, 1))
        B[n:, 0] = -1.0
        acc_input = np.zeros((n, 1))
    else:
        B = np.zeros((2 * n, n))
        B[n:, :] = Minv
        acc_input = Minv
    return StateSpaceModel(A, B, A[n:, :].copy(), acc_input)


def state_space(spec, theta):
    M, K, C = assemble_matrices(spec, theta)
    return _state_space(M, K, C, spec.excitation)


def discretize(model, dt):
    """Exact zero-order-hold discretization.

    Returns ``(Ad, Bd)`` read off the exponential of the augmented matrix
    ``[[A, B], [0, 0]] * dt``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    A, B = model.A, model.B
    ns, ni = B.shape
    E = np.zeros((ns + ni, ns + ni))
    E[:ns, :ns] = A
    E[:ns, ns:] = B
    with np.errstate(over="raise", invalid="raise"):
        try:
            F = linalg.expm(E * dt)
        except FloatingPointError:
            raise OverflowError("matrix exponential overflowed; reduce dt") from None
    if not np.all(np.isfinite(F)):
        raise OverflowError("matrix exponential overflowed; reduce dt")
    return F[:ns, :ns], F[:ns, ns:]


def _propagate(Ad, x0, forcing, n):
    """Run ``x[k+1] = Ad x[k] + forcing[k]`` for many columns at once.

    ``x0`` has shape (ns, m) and ``forcing`` (ns, m, n - 1) or None. Uses
    the eigenbasis of ``Ad`` so every mode is an IIR filter pass; of each
    complex-conjugate pair only one member is filtered since the other
    contributes the conjugate.
    """
    ns, m = x0.shape
    lam, V = linalg.eig(Ad)
    if np.linalg.cond(V) > 1e8:
        return _propagate_loop(Ad, x0, forcing, n)
    keep = np.flatnonzero(lam.imag >= 0)
    weight = np.where(lam.imag[keep] > 0, 2.0, 1.0)
    Vinv = linalg.inv(V)[keep]
    h = np.zeros((keep.size, m, n), dtype=complex)
    h[:, :, 0] = Vinv @ x0
    if forcing is not None and n > 1:
        h[:, :, 1:] = (Vinv @ forcing.reshape(ns, -1)).reshape(keep.size, m, n - 1)
    for i, r in enumerate(keep):
        h[i] = signal.lfilter([1.0], [1.0, -lam[r]], h[i], axis=-1)
    return ((V[:, keep] * weight) @ h.reshape(keep.size, -1)).real.reshape(ns, m, n)


def _propagate_loop(Ad, x0, forcing, n):
    ns, m = x0.shape
    out = np.empty((ns, m, n))
    out[:, :, 0] = x0
    for k in range(1, n):
        out[:, :, k] = Ad @ out[:, :, k - 1]
        if forcing is not None:
            out[:, :, k] += forcing[:, :, k - 1]
    return out


@dataclass
class ResponseHistory:
    """Displacement, velocity and acceleration, each N_DOF x n."""

    dt: float
    displacement: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray

    @property
    def n(self):
        return self.displacement.shape[1]

    def quantity(self, name):
        return getattr(self, name)


def _input_matrix(spec, u, n):
    u = np.asarray(u, dtype=float)
    n_inputs = 1 if spec.excitation == BASE_ACCELERATION else spec.n_dof
    if u.ndim == 1:
        u = u[None, :]
    if u.shape != (n_inputs, n):
        raise DimensionMismatch(f"input must have shape ({n_inputs}, {n}), got {u.shape}")
    return u


def _psi(spec, psi):
    if psi is None:
        return np.zeros(2 * spec.n_dof)
    psi = np.asarray(psi, dtype=float).reshape(-1)
    if psi.size != 2 * spec.n_dof:
        raise DimensionMismatch(f"expected {2 * spec.n_dof} initial conditions, got {psi.size}")
    if not np.all(np.isfinite(psi)):
        raise ValueError("initial conditions must be finite")
    return psi


def simulate(spec, theta, psi, u, dt, n):
    """Simulate the model response from initial conditions ``psi``.

    ``psi`` stacks initial displacements then velocities. ``u`` is the ground
    acceleration (base excitation) or the nodal force history, with ``n``
    samples.
    """
    ss = state_space(spec, theta)
    psi = _psi(spec, psi)
    u = _input_matrix(spec, u, n)
    Ad, Bd = discretize(ss, dt)
    X = _propagate(Ad, psi[:, None], (Bd @ u[:, :-1])[:, None, :], n)[:, 0, :]
    return _history(ss, X, u, dt)


def _history(ss, X, u, dt):
    nd = ss.n_dof
    acc = ss.acc_state @ X + ss.acc_input @ u
    return ResponseHistory(dt, X[:nd], X[nd:], acc)


@dataclass
class Sensitivities:
    """Response history plus its derivatives.

    Each derivative array has shape (n_params, N_DOF, n) with parameters
    ordered as ``[theta, psi]``.
    """

    response: ResponseHistory
    displacement: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    n_theta: int

    def quantity(self, name):
        return getattr(self, name)


def response_sensitivities(spec, theta, psi, u, dt, n):
    """Derivatives of every response sample w.r.t. ``theta`` and ``psi``.

    Obtained by differentiating the discrete recursion: the derivative of the
    transition and input matrices comes from the Frechet derivative of the
    augmented exponential, and each parameter contributes one augmented
    sensitivity state driven by ``dAd x[k] + dBd u[k]``.
    """
    theta = _as_theta(spec, theta)
    M, K, C = assemble_matrices(spec, theta)
    ss = _state_space(M, K, C, spec.excitation)
    psi = _psi(spec, psi)
    u = _input_matrix(spec, u, n)
    nd = spec.n_dof
    ns, ni = ss.B.shape
    E = np.zeros((ns + ni, ns + ni))
    E[:ns, :ns] = ss.A
    E[:ns, ns:] = ss.B
    Minv = np.linalg.inv(M)
    dA_list = []
    dAd, dBd = [], []
    for dK, dC in spec._derivatives(theta):
        dA = np.zeros((ns, ns))
        dA[nd:, :nd] = -Minv @ dK
        dA[nd:, nd:] = -Minv @ dC
        dA_list.append(dA)
        dE = np.zeros_like(E)
        dE[:ns, :ns] = dA
        F, L = linalg.expm_frechet(E * dt, dE * dt)
        dAd.append(L[:ns, :ns])
        dBd.append(L[:ns, ns:])
    Ad, Bd = F[:ns, :ns], F[:ns, ns:]

    # column 0: the response itself; columns 1..ns: unit initial states
    x0 = np.concatenate([psi[:, None], np.eye(ns)], axis=1)
    forcing = np.zeros((ns, 1 + ns, max(n - 1, 0)))
    forcing[:, 0, :] = Bd @ u[:, :-1]
    Z = _propagate(Ad, x0, forcing, n)
    X = Z[:, 0, :]
    dpsi = np.moveaxis(Z[:, 1:, :], 1, 0)  # (ns, ns, n): param, state, time

    nt = len(dAd)
    if nt:
        f = np.stack([dAd[p] @ X[:, :-1] + dBd[p] @ u[:, :-1] for p in range(nt)], axis=1)
        dth = np.moveaxis(_propagate(Ad, np.zeros((ns, nt)), f, n), 1, 0)
    else:
        dth = np.zeros((0, ns, n))
    dstate = np.concatenate([dth, dpsi], axis=0)

    dacc = ss.acc_state @ dstate
    for p, dA in enumerate(dA_list):
        dacc[p] += dA[nd:, :] @ X
    return Sensitivities(
        response=_history(ss, X, u, dt),
        displacement=dstate[:, :nd, :],
        velocity=dstate[:, nd:, :],
        acceleration=dacc,
        n_theta=nt,
    )
