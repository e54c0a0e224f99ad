"""Constitutive laws, regularisation cutoffs and the noise coefficient family."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .spectral import SpectralField, SpectralVectorField, TorusGrid, h_n_norm


class NegativeDensity(ValueError):
    """A density sample is negative."""

    def __init__(self, location, value):
        self.location = location
        self.value = value
        super().__init__(f"negative density {value:.3e} at grid index {location}")


def check_density(rho) -> np.ndarray:
    r = rho.samples if hasattr(rho, "samples") else np.asarray(rho)
    if r.min() < 0:
        idx = np.unravel_index(int(np.argmin(r)), r.shape)
        raise NegativeDensity(tuple(int(i) for i in idx), float(r[idx]))
    return r


LEVELS = ("zero", "delta")


@dataclass(frozen=True)
class ModelParams:
    """Physical and regularisation constants.

    ``level='zero'`` selects the Galerkin system with velocity truncation,
    mass stabilisation and damping terms; ``level='delta'`` drops those
    and keeps only the artificial viscosity and pressure.
    """

    a: float = 1.0
    gamma: float = 2.0
    mu: float = 1.0
    eta: float = 0.0
    M0: float = 4.0
    eps: float = 0.1
    delta: float = 0.0
    Gamma: float = 6.0
    R: float = math.inf
    level: str = "zero"

    def __post_init__(self):
        checks = [
            (self.a > 0, "a", "a > 0"),
            (self.gamma >= 1, "gamma", "gamma >= 1"),
            (self.mu > 0, "mu", "mu > 0"),
            (self.eta >= 0, "eta", "eta >= 0"),
            (self.M0 > 0, "M0", "M0 > 0"),
            (self.eps >= 0, "eps", "eps >= 0"),
            (self.delta >= 0, "delta", "delta >= 0"),
            (self.R > 0, "R", "R > 0"),
            (self.level in LEVELS, "level", f"level in {LEVELS}"),
        ]
        if self.delta > 0:
            checks.append(
                (self.Gamma > max(4.5, self.gamma), "Gamma", "Gamma > max(9/2, gamma) when delta > 0")
            )
        for ok, name, rule in checks:
            if not ok:
                raise ParameterError(name, rule)

    def check_dimension(self, d: int) -> None:
        """Adiabatic-exponent range required for the existence theory in dimension d."""
        if d == 3 and not self.gamma > 1.5:
            raise ParameterError("gamma", "γ > 3/2 required for d=3")
        if d == 2 and not self.gamma > 1:
            raise ParameterError("gamma", "γ > 1 required for d=2")
        if d == 1 and not self.gamma >= 1:
            raise ParameterError("gamma", "γ ≥ 1 required for d=1")

    @property
    def zero_level(self) -> bool:
        return self.level == "zero"

    def as_tuple(self) -> tuple:
        """Fixed-order float tuple used by the snapshot format."""
        return (
            self.a, self.gamma, self.mu, self.eta, self.M0,
            self.eps, self.delta, self.Gamma, self.R,
        )


class ParameterError(ValueError):
    def __init__(self, name: str, rule: str):
        self.name = name
        self.rule = rule
        super().__init__(f"{name}: {rule}")


def _phi(s):
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)


def cutoff_H(x):
    """Smooth non-increasing step: 1 for x <= 0, 0 for x >= 1, H(1/2) = 1/2."""
    x = np.asarray(x, dtype=float)
    a = _phi(1.0 - x)
    b = _phi(x)
    inside = (x > 0) & (x < 1)
    with np.errstate(invalid="ignore"):
        mid = a / np.where(inside, a + b, 1.0)
    out = np.where(x <= 0, 1.0, np.where(x >= 1, 0.0, mid))
    return float(out) if out.ndim == 0 else out


def truncation_factor(u: SpectralVectorField, R: float) -> float:
    if math.isinf(R):
        return 1.0
    return cutoff_H(h_n_norm(u) - R)


def truncate_velocity(u: SpectralVectorField, R: float) -> SpectralVectorField:
    """``[u]_R = H(||u||_{H_N} - R) u``."""
    return u * truncation_factor(u, R)


def solve_M_epsilon(eps: float, M0: float) -> float:
    """Unique root of ``2 eps M = H(M / M0)`` on ``(0, M0]``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not M0 > 0:
        raise ValueError("M0 must be positive")
    g = lambda M: 2.0 * eps * M - cutoff_H(M / M0)
    if g(M0) <= 0:
        return M0
    return brentq(g, 0.0, M0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def pressure(rho: SpectralField, params: ModelParams) -> SpectralField:
    """``a rho^gamma + delta rho^Gamma`` evaluated at collocation points."""
    r = check_density(rho)
    return SpectralField.from_samples(rho.grid, pressure_samples(r, params))


def pressure_samples(r: np.ndarray, p: ModelParams) -> np.ndarray:
    out = p.a * r**p.gamma
    if p.delta:
        out = out + p.delta * r**p.Gamma
    return out


def potential(r: np.ndarray, p: ModelParams) -> np.ndarray:
    """Pressure potential P with ``r P'(r) - P(r) = p(r)``."""
    if p.gamma == 1:
        out = p.a * (np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)), 0.0) - r + 1.0)
    else:
        out = p.a / (p.gamma - 1) * r**p.gamma
    if p.delta:
        out = out + p.delta / (p.Gamma - 1) * r**p.Gamma
    return out


def potential_prime(r: np.ndarray, p: ModelParams) -> np.ndarray:
    if p.gamma == 1:
        out = p.a * np.log(r)
    else:
        out = p.a * p.gamma / (p.gamma - 1) * r ** (p.gamma - 1)
    if p.delta:
        out = out + p.delta * p.Gamma / (p.Gamma - 1) * r ** (p.Gamma - 1)
    return out


def potential_second(r: np.ndarray, p: ModelParams) -> np.ndarray:
    out = p.a * p.gamma * r ** (p.gamma - 2)
    if p.delta:
        out = out + p.delta * p.Gamma * r ** (p.Gamma - 2)
    return out


def stress(grad_u: np.ndarray, params: ModelParams) -> np.ndarray:
    """Newtonian stress from ``grad_u[i, j] = d_j u_i``."""
    d = grad_u.shape[0]
    div = np.trace(grad_u, axis1=0, axis2=1)
    eye = np.eye(d).reshape((d, d) + (1,) * (grad_u.ndim - 2))
    sym = grad_u + np.swapaxes(grad_u, 0, 1)
    return params.mu * (sym - (2.0 / 3.0) * div * eye) + params.eta * div * eye


# ---------------------------------------------------------------- noise


def default_wavevectors(K: int, d: int) -> np.ndarray:
    """First K nonzero vectors of {0,1,...}^d ordered by max-norm then lexicographically."""
    out = []
    r = 1
    while len(out) < K:
        shell = [
            v for v in np.ndindex(*([r + 1] * d)) if max(v) == r
        ]
        out.extend(sorted(shell))
        r += 1
    return np.array(out[:K], dtype=int).reshape(K, d)


@dataclass(frozen=True)
class NoiseModel:
    """Parity-respecting trigonometric noise coefficients.

    ``g_k^i = alpha_k s(rho) c(q^i) sin(2 pi kappa_i x_i / L) prod_{j != i} cos(2 pi kappa_j x_j / L)``

    with ``s(rho) = 1 / (1 + rho)`` and ``c = 1`` for the default family.
    ``family='modulated'`` uses ``s(rho) = 1 / (2 (1 + rho))`` and
    ``c(q) = 1 / (1 + q^2)``, a momentum-dependent alternative with the same
    bounds and parity.
    """

    amplitudes: np.ndarray
    wavevectors: np.ndarray
    family: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "amplitudes", np.asarray(self.amplitudes, dtype=float))
        object.__setattr__(self, "wavevectors", np.asarray(self.wavevectors, dtype=int))
        if np.any(self.amplitudes < 0):
            raise ValueError("noise amplitudes must be non-negative")
        if self.wavevectors.shape[0] != self.amplitudes.shape[0]:
            raise ValueError("one wavevector per amplitude required")
        if self.family not in ("default", "modulated"):
            raise ValueError(f"unknown noise family {self.family!r}")

    @classmethod
    def default(cls, K: int, d: int, A: float = 1.0, family: str = "default") -> "NoiseModel":
        k = np.arange(1, K + 1, dtype=float)
        return cls(A / k, default_wavevectors(K, d), family)

    @classmethod
    def off(cls, d: int) -> "NoiseModel":
        return cls(np.zeros(0), np.zeros((0, d), dtype=int))

    @property
    def K(self) -> int:
        return int(self.amplitudes.shape[0])

    @property
    def total(self) -> float:
        """G = sum of squared amplitudes."""
        return float(np.sum(self.amplitudes**2))

    @property
    def q_dependent(self) -> bool:
        return self.family == "modulated"

    @property
    def is_off(self) -> bool:
        return self.K == 0 or not np.any(self.amplitudes)

    def density_factor(self, rho):
        if self.family == "modulated":
            return 0.5 / (1.0 + rho)
        return 1.0 / (1.0 + rho)

    def density_factor_prime(self, rho):
        if self.family == "modulated":
            return -0.5 / (1.0 + rho) ** 2
        return -1.0 / (1.0 + rho) ** 2

    def momentum_factor(self, q):
        return 1.0 / (1.0 + q**2)

    def momentum_factor_prime(self, q):
        return -2.0 * q / (1.0 + q**2) ** 2

    def basis(self, grid: TorusGrid) -> np.ndarray:
        """Trigonometric factors, shape ``(K, d, *grid)``, amplitudes included."""
        return _trig_basis(grid, self.wavevectors) * self.amplitudes.reshape(
            (-1, 1) + (1,) * grid.d
        )

    def trig(self, x: np.ndarray, L: float) -> np.ndarray:
        """Trigonometric factors at arbitrary points ``x`` of shape ``(d, ...)``."""
        d = x.shape[0]
        out = np.ones((self.K, d) + x.shape[1:])
        w = 2.0 * np.pi / L
        for k, kap in enumerate(self.wavevectors):
            for i in range(d):
                for j in range(d):
                    f = np.sin if i == j else np.cos
                    out[k, i] *= f(w * kap[j] * x[j])
        return out

    def g(self, x: np.ndarray, rho, q, L: float) -> np.ndarray:
        """Pointwise coefficients ``g_k(x, rho, q)``, shape ``(K, d, ...)``."""
        rho = np.asarray(rho, dtype=float)
        t = self.trig(x, L) * self.density_factor(rho)
        if self.q_dependent:
            t = t * self.momentum_factor(np.asarray(q, dtype=float))
        return t * self.amplitudes.reshape((-1,) + (1,) * (t.ndim - 1))

    def coefficients(self, grid: TorusGrid, rho: np.ndarray, q: np.ndarray | None = None) -> np.ndarray:
        """``g_k`` sampled on the grid, shape ``(K, d, *grid)``."""
        out = self.basis(grid) * self.density_factor(rho)
        if self.q_dependent:
            out = out * self.momentum_factor(q)
        return out


def _trig_basis(grid: TorusGrid, wavevectors: np.ndarray) -> np.ndarray:
    K = wavevectors.shape[0]
    d = grid.d
    out = np.ones((K, d) + grid.shape)
    w = 2.0 * np.pi / grid.L
    x = grid.coords
    for k, kap in enumerate(wavevectors):
        for i in range(d):
            for j in range(d):
                f = np.sin if i == j else np.cos
                out[k, i] = out[k, i] * f(w * kap[j] * x[j])
    return out


def noise_eval(model: NoiseModel, rho: SpectralField, q: SpectralVectorField | None = None) -> list:
    """``G_k = rho g_k(x, rho, q)`` for every noise mode."""
    r = check_density(rho)
    grid = rho.grid
    qs = None
    if model.q_dependent:
        qs = q.samples if q is not None else np.zeros((grid.d,) + grid.shape)
    g = model.coefficients(grid, r, qs)
    return [SpectralVectorField.from_samples(grid, r * gk) for gk in g]
