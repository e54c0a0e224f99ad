"""Audits of the a priori structures behind the Galerkin system.

Every time-integrated quantity is a left-endpoint (Ito) sum over the steps
stored in a ``TrajectoryRecord``, so records must keep every step
(``stride == 1``) for the balance and flux residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .dynamics import GalerkinSystem, State, TrajectoryRecord
from .model import (
    ModelParams,
    NoiseModel,
    check_density,
    cutoff_H,
    potential,
    potential_prime,
    potential_second,
    pressure_samples,
    solve_M_epsilon,
    stress,
)
from .spectral import (
    SpectralVectorField,
    jacobian,
    random_band_limited,
    sobolev12_sq,
    symmetry_project,
    vector_symmetry_defect,
)


class ZeroField(ValueError):
    """The velocity field vanishes identically."""


class WindowError(ValueError):
    """Requested window is not covered by the record."""


# ---------------------------------------------------------------- per-state kernels


class _Probe:
    """Grid quantities of one state shared by several diagnostics."""

    def __init__(self, sys: GalerkinSystem, state: State):
        self.sys = sys
        g = sys.grid
        self.grid = g
        self.state = state
        self.rho = state.rho_samples
        check_density(self.rho)
        self.u = state.u_samples
        self.h = sys.velocity_factor(state.u_hat)
        self.source = sys.mass_source(state.mean_density)
        self._grad_u = None
        self._grad_rho = None

    def integrate(self, a):
        return float(self.grid.integrate(a))

    @property
    def grad_u(self) -> np.ndarray:
        if self._grad_u is None:
            g = self.grid
            uh = self.state.u_hat
            self._grad_u = np.stack([g.irfft(self.sys.D * uh[i][None]) for i in range(g.d)])
        return self._grad_u

    @property
    def grad_rho(self) -> np.ndarray:
        if self._grad_rho is None:
            self._grad_rho = self.grid.irfft(self.sys.D * self.state.rho_hat)
        return self._grad_rho

    def div_u(self) -> np.ndarray:
        return np.trace(self.grad_u, axis1=0, axis2=1)

    def noise_coefficients(self) -> np.ndarray:
        if self.sys.noise.K == 0:
            return np.zeros((0, self.grid.d) + self.grid.shape)
        return self.sys.noise_coefficients(self.rho, self.u)


# ---------------------------------------------------------------- energy


@dataclass
class EnergyReport:
    kinetic: float
    pressure_potential: float
    artificial_potential: float
    total: float
    dissipation: float = 0.0
    eps_dissipation: float = 0.0
    ito_correction: float = 0.0
    stochastic_integral: float = 0.0


def energy(state: State, params: ModelParams, noise: NoiseModel | None = None) -> EnergyReport:
    """Energy components of a state, with the instantaneous dissipation rates."""
    sys = GalerkinSystem(state.grid, params, noise)
    pr = _Probe(sys, state)
    r, u = pr.rho, pr.u
    kin = pr.integrate(0.5 * r * np.sum(u**2, axis=0))
    pp = pr.integrate(potential(r, ModelParams(**{**_fields(params), "delta": 0.0})))
    ap = pr.integrate(params.delta / (params.Gamma - 1) * r**params.Gamma) if params.delta else 0.0
    rates = _energy_rates(pr, params)
    return EnergyReport(
        kinetic=kin,
        pressure_potential=pp,
        artificial_potential=ap,
        total=kin + pp + ap,
        dissipation=rates["viscous"],
        eps_dissipation=rates["eps_velocity"] + rates["eps_density"],
        ito_correction=rates["ito"],
    )


def _fields(p: ModelParams) -> dict:
    return {k: getattr(p, k) for k in p.__dataclass_fields__}


def total_energy(state: State, params: ModelParams) -> float:
    r = state.rho_samples
    check_density(r)
    u = state.u_samples
    g = state.grid
    return float(g.integrate(0.5 * r * np.sum(u**2, axis=0) + potential(r, params)))


def _energy_rates(pr: _Probe, p: ModelParams) -> dict:
    r, u = pr.rho, pr.u
    u2 = np.sum(u**2, axis=0)
    S = stress(pr.grad_u, p)
    out = {
        "viscous": pr.integrate(np.sum(S * pr.grad_u, axis=(0, 1))),
        "eps_velocity": p.eps * pr.integrate(r * np.sum(pr.grad_u**2, axis=(0, 1))),
        "eps_density": p.eps * pr.integrate(potential_second(r, p) * np.sum(pr.grad_rho**2, axis=0)),
        "damping": 0.0,
        "source_kinetic": 0.0,
        "source_potential": 0.0,
        "ito": 0.0,
    }
    if p.zero_level:
        out["damping"] = 2.0 * p.eps * pr.integrate(0.5 * r * u2 + r * potential_prime(r, p))
        out["source_kinetic"] = 0.5 * pr.source * pr.integrate(u2)
        out["source_potential"] = pr.source * pr.integrate(potential_prime(r, p))
    gk = pr.noise_coefficients()
    if len(gk):
        out["ito"] = 0.5 * pr.integrate(r * np.sum(gk**2, axis=(0, 1)))
    return out


_DISSIPATIVE = ("damping", "viscous", "eps_velocity", "eps_density", "source_kinetic")
_SOURCES = ("ito", "source_potential")


@dataclass
class BalanceReport:
    residual: float
    terms: dict = field(default_factory=dict)
    window: tuple = (0.0, 0.0)


def _check_window(record: TrajectoryRecord, window):
    if record.stride != 1:
        raise WindowError("balance residuals need every step recorded (stride = 1)")
    times = record.times
    if window is None:
        return 0, len(record) - 1
    try:
        return record.window(*window)
    except ValueError as exc:
        raise WindowError(f"window {window} outside record [{times[0]}, {times[-1]}]") from exc


def energy_balance_residual(
    record: TrajectoryRecord,
    window=None,
    params: ModelParams | None = None,
    noise: NoiseModel | None = None,
) -> BalanceReport:
    """Discrete residual of the Ito energy balance over a window.

    residual = E(t1) - E(t0) + sum dt (dissipative rates) - sum dt (source rates)
               - sum_k sum_n (int rho Pi_N g_k . u) dW_k
    """
    params = params or record.params
    noise = noise if noise is not None else record.noise
    i0, i1 = _check_window(record, window)
    sys = GalerkinSystem(record.grid, params, noise)
    dt = record.dt
    acc = {k: 0.0 for k in _DISSIPATIVE + _SOURCES}
    stoch = 0.0
    for i in range(i0, i1):
        pr = _Probe(sys, record.states[i])
        rates = _energy_rates(pr, params)
        for k in acc:
            acc[k] += dt * rates[k]
        gk = pr.noise_coefficients()
        if len(gk):
            proj = np.array([pr.integrate(pr.rho * np.sum(g * pr.u, axis=0)) for g in gk])
            stoch += float(np.dot(proj, record.increments[i]))
    e0 = total_energy(record.states[i0], params)
    e1 = total_energy(record.states[i1], params)
    res = (e1 - e0) + sum(acc[k] for k in _DISSIPATIVE) - sum(acc[k] for k in _SOURCES) - stoch
    terms = {"energy_start": e0, "energy_end": e1, **acc, "stochastic": stoch}
    return BalanceReport(float(res), terms, (float(record.times[i0]), float(record.times[i1])))


# ---------------------------------------------------------------- mass and density


def mass_reference(masses0: float, times: np.ndarray, params: ModelParams) -> np.ndarray:
    """High-order Runge-Kutta solution of dM/dt = -2 eps M + H(M / M0)."""
    if not params.zero_level:
        return np.full_like(times, masses0, dtype=float)
    eps, M0 = params.eps, params.M0
    t0 = float(times[0])
    sol = solve_ivp(
        lambda t, M: -2.0 * eps * M + cutoff_H(M / M0),
        (t0, float(times[-1]) if len(times) > 1 else t0),
        [masses0],
        method="DOP853",
        t_eval=times,
        rtol=1e-12,
        atol=1e-14,
    )
    return sol.y[0]


def mass_ode_residual(record: TrajectoryRecord, params: ModelParams | None = None) -> float:
    """Max deviation of the total mass from the mass ODE over the record."""
    params = params or record.params
    m = np.array([s.mass for s in record.states])
    if len(m) == 1:
        return 0.0
    ref = mass_reference(m[0], record.times, params)
    return float(np.max(np.abs(m - ref)))


@dataclass
class LowerBoundReport:
    min_rho: float
    bound: float
    divergence: float
    mass_equilibrium: float

    @property
    def ratio(self) -> float:
        """Observed floor divided by the comparison bound."""
        return self.min_rho / self.bound if self.bound > 0 else math.inf


def density_lower_bound(record: TrajectoryRecord, from_time: float, params: ModelParams | None = None) -> LowerBoundReport:
    """Observed density floor after ``from_time`` against ``H(M_eps/M0) / (|T| (2 eps + D))``.

    ``D`` is the largest ``|div [u]_R|`` seen in the recorded states.
    """
    params = params or record.params
    times = record.times
    sel = [i for i, t in enumerate(times) if t >= from_time - 1e-12]
    if not sel:
        raise WindowError(f"no samples after t={from_time}")
    sys = GalerkinSystem(record.grid, params, None)
    mins = []
    D = 0.0
    for i in sel:
        pr = _Probe(sys, record.states[i])
        mins.append(float(pr.rho.min()))
        D = max(D, float(np.abs(pr.h * pr.div_u()).max()))
    Meps = solve_M_epsilon(params.eps, params.M0)
    src = cutoff_H(Meps / params.M0) / record.grid.volume
    bound = src / (2.0 * params.eps + D)
    return LowerBoundReport(min(mins), bound, D, Meps)


# ---------------------------------------------------------------- renormalised continuity


@dataclass(frozen=True)
class Renormalization:
    """A renormalising function with its first two derivatives."""

    name: str
    b: object
    db: object
    d2b: object


RENORM_LINEAR = Renormalization("z", lambda z: z, lambda z: np.ones_like(z), lambda z: np.zeros_like(z))
RENORM_CONSTANT = Renormalization(
    "1", lambda z: np.ones_like(z), lambda z: np.zeros_like(z), lambda z: np.zeros_like(z)
)
RENORM_ZLOGZ = Renormalization(
    "z log z", lambda z: z * np.log(z), lambda z: np.log(z) + 1.0, lambda z: 1.0 / z
)


def renorm_continuity_residual(
    record: TrajectoryRecord, b: Renormalization, window=None, params: ModelParams | None = None
) -> BalanceReport:
    """Residual of the renormalised continuity equation tested with ``b``.

    residual = [int b(rho)] - sum dt ( -int (b'(rho) rho - b(rho)) div [u]_R
               - eps int b''(rho) |grad rho|^2 + int b'(rho) (-2 eps rho + s) )
    """
    params = params or record.params
    i0, i1 = _check_window(record, window)
    sys = GalerkinSystem(record.grid, params, None)
    dt = record.dt
    acc = {"compression": 0.0, "diffusion": 0.0, "reaction": 0.0}
    for i in range(i0, i1):
        pr = _Probe(sys, record.states[i])
        r = pr.rho
        acc["compression"] -= dt * pr.h * pr.integrate((b.db(r) * r - b.b(r)) * pr.div_u())
        acc["diffusion"] -= dt * params.eps * pr.integrate(b.d2b(r) * np.sum(pr.grad_rho**2, axis=0))
        if params.zero_level:
            acc["reaction"] += dt * pr.integrate(b.db(r) * (-2.0 * params.eps * r + pr.source))
    grid = record.grid
    b0 = float(grid.integrate(b.b(record.states[i0].rho_samples)))
    b1 = float(grid.integrate(b.b(record.states[i1].rho_samples)))
    res = (b1 - b0) - sum(acc.values())
    return BalanceReport(float(res), {"start": b0, "end": b1, **acc}, (record.times[i0], record.times[i1]))


# ---------------------------------------------------------------- Korn-Poincare, ergodic averages


def korn_poincare_ratio(u: SpectralVectorField, params: ModelParams) -> float:
    """``int S(grad u) : grad u / ||u||_{W^{1,2}}^2``."""
    if vector_symmetry_defect(u) > 1e-10 * max(1.0, math.sqrt(sobolev12_sq(u))):
        raise ValueError("velocity is not in the symmetry class")
    den = sobolev12_sq(u)
    if den == 0.0:
        raise ZeroField("u vanishes identically")
    J = jacobian(u)
    num = float(u.grid.integrate(np.sum(stress(J, params) * J, axis=(0, 1))))
    return num / den


def random_symmetric_velocity(grid, bandwidth: int, rng) -> SpectralVectorField:
    v = random_band_limited(grid, bandwidth, rng, components=grid.d)
    rho0 = random_band_limited(grid, 0, rng)
    return symmetry_project(rho0, v)[1]


def korn_poincare_sweep(grid, params: ModelParams, rng, count: int = 100, bandwidth: int | None = None) -> np.ndarray:
    """Ratios over a random family of symmetric band-limited fields."""
    bw = grid.N if bandwidth is None else bandwidth
    out = []
    while len(out) < count:
        u = random_symmetric_velocity(grid, bw, rng)
        # scale diversity: damp high modes by a random power law
        damp = (1.0 + grid.k2) ** (-rng.uniform(0.0, 2.0))
        u = SpectralVectorField.from_modes(grid, u.modes * damp)
        if sobolev12_sq(u) > 0:
            out.append(korn_poincare_ratio(u, params))
    return np.array(out)


def ergodic_velocity_average(record: TrajectoryRecord, T: float, t0: float | None = None):
    """``(1/T) sum ||u(t_i)||^2_{W^{1,2}} dt`` over ``[t0, t0 + T)``.

    Returns the average and the running partial averages (one per sample).
    """
    times = record.times
    t0 = times[0] if t0 is None else t0
    i0 = record.index_of(t0)
    count = int(round(T / record.sample_dt))
    if i0 + count > len(record) or count <= 0:
        raise WindowError(f"[{t0}, {t0 + T}) not covered by the record")
    vals = np.array([sobolev12_sq(s.u) for s in record.states[i0 : i0 + count]])
    cum = np.cumsum(vals) / np.arange(1, count + 1)
    return float(cum[-1]), cum


# ---------------------------------------------------------------- effective viscous flux


@dataclass
class FluxReport:
    level: str
    alpha: float
    window: tuple
    terms: dict
    residual: float
    gained: dict

    def rows(self):
        yield from self.terms.items()
        yield "residual", self.residual
        yield from (("gained_" + k, v) for k, v in self.gained.items())


FLUX_TERMS = (
    "pressure_gain",
    "pressure_mean",
    "convective",
    "viscous",
    "eps_momentum",
    "density_transport",
    "density_regularization",
)


def _check_alpha(alpha: float):
    if not (0.0 < alpha < 1.0 / 3.0):
        raise ValueError(f"α ∈ (0, 1/3) required, got α = {alpha}")


def flux_rates(state: State, params: ModelParams, noise: NoiseModel | None, level: str, alpha: float | None = None):
    """Instantaneous terms of the flux identity for the test field ``Pi_N grad Delta^{-1} b(rho)``.

    Returns ``(F, rates, noise_projections)`` where ``F = int rho u . Pi_N grad Delta^{-1} b(rho)``.
    """
    sys = GalerkinSystem(state.grid, params, noise)
    return _flux_rates(_Probe(sys, state), params, level, alpha)


def _renorm_for(level, alpha):
    if level == "epsilon":
        return (lambda z: z), (lambda z: np.ones_like(z))
    if level == "delta":
        _check_alpha(alpha)
        return (lambda z: z**alpha), (lambda z: alpha * z ** (alpha - 1.0))
    raise ValueError(f"level must be 'epsilon' or 'delta', got {level!r}")


def _flux_rates(pr: _Probe, p: ModelParams, level: str, alpha):
    b, db = _renorm_for(level, alpha)
    sys = pr.sys
    g = pr.grid
    D = sys.D
    mask = sys.mask
    inv = g._rslice(g.inv_k2)
    r, u, h = pr.rho, pr.u, pr.h

    def riesz_N(f):
        """Pi_N grad Delta^{-1} f as samples."""
        return g.irfft(-D * inv * g.rfft(f) * mask)

    beta = b(r)
    phi = riesz_N(beta)
    beta_hat = g.rfft(beta)
    betaN = g.irfft(beta_hat * mask)
    beta_mean = float(beta_hat.flat[0].real)
    m = r * u
    F = pr.integrate(np.sum(m * phi, axis=0))

    pres = pressure_samples(r, p)
    grad_phi = np.stack([g.irfft(D * g.rfft(phi[i])[None]) for i in range(g.d)])  # [i, j] = d_j phi_i
    lap_phi = g.irfft(-sys.k2 * g.rfft(phi))
    flux = h * m
    div_flux = g.irfft(np.sum(D * g.rfft(flux), axis=0))
    lap_rho = g.irfft(-sys.k2 * pr.state.rho_hat)
    reg = p.eps * lap_rho
    if p.zero_level:
        reg = reg - 2.0 * p.eps * r + pr.source
    rates = {
        "pressure_gain": h * pr.integrate(pres * betaN),
        "pressure_mean": h * beta_mean * pr.integrate(pres),
        "convective": pr.integrate(np.einsum("jx,ix,ijx->x", flux.reshape(g.d, -1), u.reshape(g.d, -1),
                                             grad_phi.reshape(g.d, g.d, -1)).reshape(g.shape)),
        "viscous": -pr.integrate(np.sum(stress(pr.grad_u, p) * grad_phi, axis=(0, 1))),
        "eps_momentum": p.eps * pr.integrate(np.sum(m * lap_phi, axis=0)),
        "density_transport": -pr.integrate(np.sum(m * riesz_N(db(r) * div_flux), axis=0)),
        "density_regularization": pr.integrate(np.sum(m * riesz_N(db(r) * reg), axis=0)),
    }
    if p.zero_level:
        rates["eps_momentum"] -= 2.0 * p.eps * F
    gk = pr.noise_coefficients()
    proj = np.array([pr.integrate(r * np.sum(gq * phi, axis=0)) for gq in gk])
    return F, rates, proj


def flux_rate_total(rates: dict) -> float:
    return sum(v for k, v in rates.items() if k != "pressure_mean") - rates["pressure_mean"]


def gained_integrability(state: State, params: ModelParams, alpha: float) -> dict:
    r = state.rho_samples
    u2 = np.sum(state.u_samples**2, axis=0)
    g = state.grid
    return {
        "pressure": float(g.integrate(params.a * r ** (params.gamma + alpha))),
        "artificial": float(g.integrate(params.delta * r ** (params.Gamma + alpha))) if params.delta else 0.0,
        "kinetic": float(g.integrate(r ** (1.0 + alpha) * u2)),
    }


def effective_viscous_flux_report(
    record: TrajectoryRecord,
    window=None,
    params: ModelParams | None = None,
    noise: NoiseModel | None = None,
    level: str = "epsilon",
    alpha: float | None = None,
) -> FluxReport:
    """Time-integrated terms of the flux identity and its discrete residual.

    ``level='epsilon'`` tests with ``b(rho) = rho``; ``level='delta'`` with
    ``b(rho) = rho**alpha``, ``0 < alpha < 1/3``.
    """
    if level == "delta":
        _check_alpha(alpha)
    else:
        _renorm_for(level, alpha)
    params = params or record.params
    noise = noise if noise is not None else record.noise
    i0, i1 = _check_window(record, window)
    sys = GalerkinSystem(record.grid, params, noise)
    dt = record.dt
    gain_alpha = 1.0 if level == "epsilon" else alpha
    acc = {k: 0.0 for k in FLUX_TERMS}
    gained = {"pressure": 0.0, "artificial": 0.0, "kinetic": 0.0}
    stoch = 0.0
    F0 = None
    for i in range(i0, i1):
        st = record.states[i]
        F, rates, proj = _flux_rates(_Probe(sys, st), params, level, alpha)
        if F0 is None:
            F0 = F
        for k in acc:
            acc[k] += dt * rates[k]
        if len(proj):
            stoch += float(np.dot(proj, record.increments[i]))
        for k, v in gained_integrability(st, params, gain_alpha).items():
            gained[k] += dt * v
    F1, _, _ = _flux_rates(_Probe(sys, record.states[i1]), params, level, alpha)
    if F0 is None:
        F0 = F1
    terms = dict(acc)
    terms["stochastic"] = stoch
    terms["boundary"] = F1 - F0
    rhs = sum(acc[k] for k in FLUX_TERMS if k != "pressure_mean") - acc["pressure_mean"] + stoch
    return FluxReport(
        level, float(gain_alpha), (record.times[i0], record.times[i1]), terms, float(terms["boundary"] - rhs), gained
    )
