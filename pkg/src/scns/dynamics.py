"""Semi-implicit Euler-Maruyama integration of the Galerkin system.

The density lives on the full collocation grid and is advanced in Fourier
space (diffusion and damping implicit, transport explicit), so its spatial
mean follows the scalar mass recursion exactly. The momentum is kept as its
Galerkin projection ``Pi_N(rho u)``; viscosity is implicit and the velocity is
recovered from the density-weighted mass system by preconditioned CG.

Products are formed pointwise on the grid. With ``n >= 2(2N+1)`` every
quadratic expression in velocity is resolved, which makes the transport and
artificial-viscosity contributions to the discrete energy cancel exactly.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    ModelParams,
    NegativeDensity,
    NoiseModel,
    check_density,
    cutoff_H,
    pressure_samples,
)
from .spectral import (
    SpectralField,
    SpectralVectorField,
    TorusGrid,
    _reflect,
    _reflections,
)


class SingularMass(RuntimeError):
    """The density-weighted mass system is too ill-conditioned to invert."""


class SolverFailure(RuntimeError):
    """A step could not be completed within the retry budget."""

    def __init__(self, message, state=None, step=None):
        self.state = state
        self.step = step
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class State:
    """Density and Galerkin velocity at one time instant.

    ``rho_hat`` and ``u_hat`` are real-FFT coefficient arrays normalised so
    that ``rho_hat[0, ..., 0]`` is the spatial mean.
    """

    grid: TorusGrid
    t: float
    rho_hat: np.ndarray
    u_hat: np.ndarray
    step: int = 0

    @classmethod
    def from_fields(cls, rho, u=None, t: float = 0.0, step: int = 0, grid=None) -> "State":
        grid = rho.grid if grid is None else grid
        r = rho.samples if hasattr(rho, "samples") else np.asarray(rho, dtype=float)
        check_density(r)
        if u is None:
            us = np.zeros((grid.d,) + grid.shape)
        else:
            us = u.samples if hasattr(u, "samples") else np.asarray(u, dtype=float)
        u_hat = grid.rfft(us) * grid.rmask
        return cls(grid, float(t), grid.rfft(r), u_hat, step)

    @property
    def rho_samples(self) -> np.ndarray:
        return self.grid.irfft(self.rho_hat)

    @property
    def u_samples(self) -> np.ndarray:
        return self.grid.irfft(self.u_hat)

    @property
    def rho(self) -> SpectralField:
        return SpectralField.from_samples(self.grid, self.rho_samples)

    @property
    def u(self) -> SpectralVectorField:
        return SpectralVectorField.from_samples(self.grid, self.u_samples)

    @property
    def q(self) -> SpectralVectorField:
        return SpectralVectorField.from_samples(self.grid, self.rho_samples * self.u_samples)

    @property
    def mean_density(self) -> float:
        return float(self.rho_hat.flat[0].real)

    @property
    def mass(self) -> float:
        return self.mean_density * self.grid.volume


def initial_state(grid: TorusGrid, params: ModelParams, rho=None, u=None) -> State:
    """Default start: uniform density ``M0 / |T|`` at rest."""
    if rho is None:
        rho = np.full(grid.shape, params.M0 / grid.volume)
    if callable(rho):
        rho = np.broadcast_to(rho(*grid.coords), grid.shape).astype(float)
    if callable(u):
        u = np.stack([np.broadcast_to(c, grid.shape) for c in u(*grid.coords)]).astype(float)
    return State.from_fields(rho, u, grid=grid)


# ---------------------------------------------------------------- Wiener paths

_BLOCK = 256


@dataclass(frozen=True)
class WienerPath:
    """Reproducible Brownian increments for ``K`` independent modes.

    Standard normals are drawn from a Philox stream keyed by
    ``(seed, member)``; block ``b`` of ``_BLOCK`` fine steps uses counter
    ``b``, so any increment can be regenerated from its step index alone.
    ``factor > 1`` gives the path on a coarser grid of step ``dt * factor``
    by summing fine increments.
    """

    seed: int
    K: int
    dt: float
    member: int = 0
    factor: int = 1
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False, compare=False)

    @property
    def step_dt(self) -> float:
        return self.dt * self.factor

    def _key(self) -> np.ndarray:
        ss = np.random.SeedSequence([int(self.seed) & 0xFFFFFFFFFFFFFFFF, int(self.member)])
        return ss.generate_state(2, np.uint64)

    def _block(self, b: int) -> np.ndarray:
        hit = self._cache.get(b)
        if hit is not None:
            return hit
        bitgen = np.random.Philox(key=self._key(), counter=np.array([0, 0, b, 0], dtype=np.uint64))
        z = np.random.Generator(bitgen).standard_normal((_BLOCK, self.K))
        self._cache[b] = z
        if len(self._cache) > 64:
            self._cache.popitem(last=False)
        return z

    def normals(self, start: int, count: int) -> np.ndarray:
        """Fine-grid standard normals for steps ``start .. start+count-1``."""
        out = np.empty((count, self.K))
        i = 0
        while i < count:
            s = start + i
            b, off = divmod(s, _BLOCK)
            take = min(_BLOCK - off, count - i)
            out[i : i + take] = self._block(b)[off : off + take]
            i += take
        return out

    def increments(self, step: int) -> np.ndarray:
        return self.block(step, 1)[0]

    def block(self, start: int, count: int) -> np.ndarray:
        """Increments for coarse steps ``start .. start+count-1``, shape ``(count, K)``."""
        if self.K == 0:
            return np.zeros((count, 0))
        z = self.normals(start * self.factor, count * self.factor)
        z = z.reshape(count, self.factor, self.K).sum(axis=1)
        return math.sqrt(self.dt) * z

    def coarsened(self, factor: int) -> "WienerPath":
        return WienerPath(self.seed, self.K, self.dt, self.member, self.factor * factor)


# ---------------------------------------------------------------- stepper


@dataclass(frozen=True)
class StepperConfig:
    dt: float = 1e-3
    scheme: str = "semi-implicit-em"
    max_retries: int = 4
    symmetric: bool = False
    cg_tol: float = 1e-13
    cg_maxiter: int = 500

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme != "semi-implicit-em":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class GalerkinSystem:
    """Discrete operators of the Galerkin system on a fixed grid.

    All arrays handed in and out are either real sample arrays or real-FFT
    coefficient arrays; the public functions below wrap them in fields.
    """

    def __init__(self, grid: TorusGrid, params: ModelParams, noise: NoiseModel | None = None):
        params.check_dimension(grid.d)
        self.grid = grid
        self.params = params
        self.noise = noise if noise is not None else NoiseModel.off(grid.d)
        if self.noise.wavevectors.shape[1] != grid.d:
            raise ValueError("noise wavevectors do not match the grid dimension")
        self.D = grid.rderiv
        self.k2 = grid.rk2
        self.mask = grid.rmask
        self.w = grid.rweight
        self.basis = self.noise.basis(grid) if self.noise.K else None
        self.basis_proj = None

    # -- elementary pieces -------------------------------------------------

    def velocity_factor(self, u_hat: np.ndarray) -> float:
        """H(||u||_{H_N} - R) at the zero level, 1 otherwise."""
        p = self.params
        if not p.zero_level or math.isinf(p.R):
            return 1.0
        norm = math.sqrt(self.grid.volume * float(np.sum(self.w * np.abs(u_hat) ** 2)))
        return cutoff_H(norm - p.R)

    def mass_source(self, mean_density: float) -> float:
        """Uniform source density ``H(mass / M0) / |T|`` (zero level only)."""
        p = self.params
        if not p.zero_level:
            return 0.0
        vol = self.grid.volume
        return cutoff_H(mean_density * vol / p.M0) / vol

    def div_hat(self, v: np.ndarray) -> np.ndarray:
        return np.sum(self.D * self.grid.rfft(v), axis=0)

    def transport_div(self, rho: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
        """Coefficients of div(rho [u]_R)."""
        return self.div_hat(h * rho * u)

    def continuity_rhs_hat(self, rho_hat, rho, u, h) -> np.ndarray:
        p = self.params
        rhs = -self.transport_div(rho, u, h) - p.eps * self.k2 * rho_hat
        if p.zero_level:
            rhs = rhs - 2.0 * p.eps * rho_hat
            rhs.flat[0] += self.mass_source(float(rho_hat.flat[0].real))
        return rhs

    def viscous_hat(self, u_hat: np.ndarray) -> np.ndarray:
        """div S(grad u) for u in H_N."""
        p = self.params
        div = np.sum(self.D * u_hat, axis=0)
        return -p.mu * self.k2 * u_hat + (p.mu / 3.0 + p.eta) * self.D * div

    def explicit_drift_hat(self, rho, u, h) -> np.ndarray:
        """Pi_N of the strong-form momentum forces except viscosity."""
        p = self.params
        g = self.grid
        rf = g.rfft
        d = g.d
        flux = h * rho * u  # rho [u]_R
        out = np.empty((d,) + g.rshape, dtype=complex)
        pres_hat = rf(pressure_samples(rho, p))
        for i in range(d):
            conv = np.sum(self.D * rf(flux * u[i]), axis=0)
            m_i = rf(rho * u[i])
            damp = p.eps * self.k2 * m_i
            if p.zero_level:
                damp = damp + 2.0 * p.eps * m_i
            out[i] = -conv - h * self.D[i] * pres_hat - damp
        return out * self.mask

    def noise_coefficients(self, rho: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Pi_N g_k sampled on the grid, shape ``(K, d, *grid)``."""
        q = rho * u if self.noise.q_dependent else None
        g = self.noise.coefficients(self.grid, rho, q)
        return self.grid.irfft(self.grid.rfft(g) * self.mask)

    def noise_forcing_hat(self, rho: np.ndarray, u: np.ndarray, dW: np.ndarray) -> np.ndarray:
        """Pi_N(rho Pi_N sum_k g_k dW_k)."""
        g = self.grid
        if self.noise.K == 0 or not np.any(dW):
            return np.zeros((g.d,) + g.rshape, dtype=complex)
        if self.noise.q_dependent:
            comb = np.tensordot(dW, self.noise.coefficients(g, rho, rho * u), axes=(0, 0))
        else:
            comb = np.tensordot(dW, self.basis, axes=(0, 0)) * self.noise.density_factor(rho)
        gt = g.irfft(g.rfft(comb) * self.mask)
        return g.rfft(rho * gt) * self.mask

    def momentum_hat(self, rho: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.grid.rfft(rho * u) * self.mask

    # -- linear algebra ----------------------------------------------------

    def _dot(self, a, b) -> float:
        return float(np.sum(self.w * (a.real * b.real + a.imag * b.imag)))

    def solve_velocity(self, rho: np.ndarray, b_hat: np.ndarray, dt: float, x0=None) -> np.ndarray:
        """Solve ``Pi_N(rho u) - dt div S(grad u) = b`` for u in H_N."""
        g = self.grid
        p = self.params
        rmin = float(rho.min())
        rmax = float(rho.max())
        if rmin <= 0 or rmax / rmin > 1e12:
            raise SingularMass(f"density ratio {rmax:.3e}/{rmin:.3e} too large for the mass system")
        mean = float(np.mean(rho))
        a = mean + dt * p.mu * self.k2
        beta = dt * (p.mu / 3.0 + p.eta)
        kk = -np.sum(self.D * self.D, axis=0).real  # |k|^2 without Nyquist

        def precond(r):
            kr = np.sum(self.D * r, axis=0)
            return (r + beta / (a + beta * kk) * self.D * kr) / a

        def apply(c):
            out = g.rfft(rho * g.irfft(c)) * self.mask
            if dt:
                out = out - dt * self.viscous_hat(c)
            return out

        b_hat = b_hat * self.mask
        bnorm = math.sqrt(self._dot(b_hat, b_hat))
        if bnorm == 0.0:
            return np.zeros_like(b_hat)
        x = precond(b_hat) if x0 is None else x0 * self.mask
        r = b_hat - apply(x)
        z = precond(r)
        d = z
        rz = self._dot(r, z)
        tol = self.cfg_tol * bnorm
        for _ in range(self.cfg_maxiter):
            if math.sqrt(self._dot(r, r)) <= tol:
                return x * self.mask
            Ad = apply(d)
            alpha = rz / self._dot(d, Ad)
            x = x + alpha * d
            r = r - alpha * Ad
            z = precond(r)
            rz_new = self._dot(r, z)
            d = z + (rz_new / rz) * d
            rz = rz_new
        if math.sqrt(self._dot(r, r)) <= 1e3 * tol:
            return x * self.mask
        raise SingularMass("mass system did not converge")

    cfg_tol = 1e-13
    cfg_maxiter = 500

    # -- symmetry ----------------------------------------------------------

    def symmetrize(self, rho: np.ndarray, u: np.ndarray):
        g = self.grid
        r_acc = np.zeros_like(rho)
        v_acc = np.zeros_like(u)
        group = _reflections(g.d)
        for flips in group:
            rr = rho
            vv = u.copy()
            for ax, on in enumerate(flips):
                if on:
                    rr = _reflect(g, rr, ax)
                    vv = _reflect(g, vv, ax)
                    vv[ax] = -vv[ax]
            r_acc += rr
            v_acc += vv
        return r_acc / len(group), v_acc / len(group)

    # -- one step ----------------------------------------------------------

    def step(self, state: State, dW: np.ndarray, dt: float, config: StepperConfig) -> State:
        p = self.params
        g = self.grid
        rho = state.rho_samples
        u = state.u_samples
        h = self.velocity_factor(state.u_hat)

        # transport and source explicit, diffusion and damping implicit
        explicit = -self.transport_div(rho, u, h)
        explicit.flat[0] = self.mass_source(float(state.rho_hat.flat[0].real))
        implicit = p.eps * self.k2
        if p.zero_level:
            implicit = implicit + 2.0 * p.eps
        rho_hat_new = (state.rho_hat + dt * explicit) / (1.0 + dt * implicit)
        rho_new = g.irfft(rho_hat_new)
        check_density(rho_new)

        b = self.momentum_hat(rho, u) + dt * self.explicit_drift_hat(rho, u, h)
        if dW is not None and len(dW):
            b = b + self.noise_forcing_hat(rho, u, dW)
        u_hat_new = self.solve_velocity(rho_new, b, dt, x0=state.u_hat)

        if config.symmetric:
            mean = rho_hat_new.flat[0]
            rs, us = self.symmetrize(rho_new, g.irfft(u_hat_new))
            rho_hat_new = g.rfft(rs)
            rho_hat_new.flat[0] = mean
            u_hat_new = g.rfft(us) * self.mask
        return State(g, state.t + dt, rho_hat_new, u_hat_new, state.step + 1)

    def advance(self, state: State, dW: np.ndarray, dt: float, config: StepperConfig, rng=None, depth=0):
        """One step with Brownian-bridge halving on negative density."""
        try:
            return self.step(state, dW, dt, config), 0
        except NegativeDensity as exc:
            if depth >= config.max_retries:
                raise SolverFailure(
                    f"negative density after {depth} halvings at t={state.t:.6g}: {exc}",
                    state=state,
                    step=state.step,
                ) from exc
        if rng is None:
            rng = np.random.default_rng([state.step, depth])
        K = 0 if dW is None else len(dW)
        mid = 0.5 * dW + 0.5 * math.sqrt(dt) * rng.standard_normal(K) if K else dW
        rest = dW - mid if K else dW
        s1, n1 = self.advance(state, mid, dt / 2, config, rng, depth + 1)
        s2, n2 = self.advance(s1, rest, dt / 2, config, rng, depth + 1)
        return State(self.grid, s2.t, s2.rho_hat, s2.u_hat, state.step + 1), 1 + n1 + n2


def _system(state: State, params: ModelParams, noise: NoiseModel | None) -> GalerkinSystem:
    return GalerkinSystem(state.grid, params, noise)


# ---------------------------------------------------------------- public ops


def continuity_rhs(state: State, params: ModelParams) -> SpectralField:
    """Right-hand side of the regularised continuity equation."""
    sys = _system(state, params, None)
    h = sys.velocity_factor(state.u_hat)
    rhs = sys.continuity_rhs_hat(state.rho_hat, state.rho_samples, state.u_samples, h)
    return SpectralField.from_samples(state.grid, state.grid.irfft(rhs))


def momentum_rhs_weak(
    state: State, params: ModelParams, noise: NoiseModel | None, dW, dt: float
) -> SpectralVectorField:
    """Increment of the momentum functional over one step, as its H_N representer.

    For every ``phi`` in H_N the returned field ``w`` satisfies
    ``int w . phi = drift(phi) dt + sum_k int rho Pi_N g_k . phi dW_k``.
    """
    sys = _system(state, params, noise)
    rho = state.rho_samples
    u = state.u_samples
    h = sys.velocity_factor(state.u_hat)
    inc = dt * (sys.explicit_drift_hat(rho, u, h) + sys.viscous_hat(state.u_hat))
    if dW is not None and noise is not None and noise.K:
        inc = inc + sys.noise_forcing_hat(rho, u, np.asarray(dW, dtype=float))
    return SpectralVectorField.from_samples(state.grid, state.grid.irfft(inc))


def momentum_coefficients(rho, u) -> SpectralVectorField:
    """H_N representer of ``phi -> int rho u . phi``."""
    grid = rho.grid
    m = grid.rfft(rho.samples * u.samples) * grid.rmask
    return SpectralVectorField.from_samples(grid, grid.irfft(m))


def recover_velocity(rho, m, params: ModelParams | None = None) -> SpectralVectorField:
    """Velocity in H_N whose momentum functional equals ``m``."""
    grid = rho.grid
    r = rho.samples
    check_density(r)
    sys = GalerkinSystem(grid, params or ModelParams(gamma=2.0))
    u_hat = sys.solve_velocity(r, grid.rfft(m.samples) * grid.rmask, 0.0)
    return SpectralVectorField.from_samples(grid, grid.irfft(u_hat))


def galerkin_basis(grid: TorusGrid) -> np.ndarray:
    """Real L2-orthonormal basis of scalar H_N, shape ``(dim, *grid)``."""
    vol = grid.volume
    out = []
    idx = grid.mode_index
    w = 2.0 * np.pi / grid.L
    seen = set()
    for m in np.ndindex(*([2 * grid.N + 1] * grid.d)):
        m = tuple(int(v) - grid.N for v in m)
        neg = tuple(-v for v in m)
        if neg in seen:
            continue
        seen.add(m)
        phase = sum(w * mj * xj for mj, xj in zip(m, grid.coords))
        if all(v == 0 for v in m):
            out.append(np.ones(grid.shape) / math.sqrt(vol))
        else:
            out.append(np.sqrt(2.0 / vol) * np.cos(phase))
            out.append(np.sqrt(2.0 / vol) * np.sin(phase))
    del idx
    return np.array(out)


def galerkin_mass_matrix(rho) -> np.ndarray:
    """Dense ``M[rho]`` on the vector basis ``phi e_i`` (block diagonal in i)."""
    grid = rho.grid
    B = galerkin_basis(grid)
    flat = B.reshape(len(B), -1)
    block = (flat * rho.samples.reshape(1, -1)) @ flat.T * grid.cell
    return np.kron(np.eye(grid.d), block)


def em_step(state: State, params: ModelParams, noise: NoiseModel | None, config: StepperConfig, dW) -> State:
    """One semi-implicit Euler-Maruyama step (with halving retries)."""
    sys = _system(state, params, noise)
    sys.cfg_tol = config.cg_tol
    sys.cfg_maxiter = config.cg_maxiter
    dW = np.zeros(sys.noise.K) if dW is None else np.asarray(dW, dtype=float)
    new, _ = sys.advance(state, dW, config.dt, config)
    return new


# ---------------------------------------------------------------- trajectories


@dataclass(eq=False)
class TrajectoryRecord:
    """States sampled every ``stride`` steps plus every Wiener increment.

    State ``i`` sits at step ``first_step + i * stride``; ``increments[j]``
    drives step ``first_step + j``.
    """

    grid: TorusGrid
    params: ModelParams
    noise: NoiseModel
    dt: float
    stride: int
    states: list
    increments: np.ndarray
    seed: int = 0
    member: int = 0
    first_step: int = 0
    origin: float = 0.0
    retries: int = 0
    symmetric: bool = False

    @property
    def times(self) -> np.ndarray:
        i = np.arange(len(self.states))
        return self.origin + (self.first_step + i * self.stride) * self.dt

    @property
    def sample_dt(self) -> float:
        return self.dt * self.stride

    def __len__(self):
        return len(self.states)

    def index_of(self, t: float) -> int:
        """Index of the sample at time ``t`` (must lie on the sample grid)."""
        x = (t - self.origin) / self.sample_dt - self.first_step / self.stride
        i = int(round(x))
        if abs(x - i) > 1e-6 or i < 0 or i >= len(self.states):
            raise ValueError(f"time {t} is not a sample of the record")
        return i

    def window(self, t0: float, t1: float) -> tuple:
        return self.index_of(t0), self.index_of(t1)

    def step_increments(self, i: int) -> np.ndarray:
        """Increments taking sample i to sample i+1, shape ``(stride, K)``."""
        return self.increments[i * self.stride : (i + 1) * self.stride]


def simulate(
    initial: State,
    T: float,
    params: ModelParams,
    noise: NoiseModel | None,
    config: StepperConfig,
    seed: int = 0,
    *,
    member: int = 0,
    stride: int = 1,
    path: WienerPath | None = None,
    hooks=(),
) -> TrajectoryRecord:
    """Integrate from ``initial`` over ``[t0, t0 + T]``.

    ``hooks`` are called as ``hook(state)`` after every step; a hook that
    raises aborts the run.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    noise = noise if noise is not None else NoiseModel.off(initial.grid.d)
    sys = GalerkinSystem(initial.grid, params, noise)
    sys.cfg_tol = config.cg_tol
    sys.cfg_maxiter = config.cg_maxiter
    dt = config.dt
    nsteps = int(round(T / dt))
    if abs(nsteps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    if path is None:
        path = WienerPath(seed, noise.K, dt, member)
    elif abs(path.step_dt - dt) > 1e-15 * dt or path.K != noise.K:
        raise ValueError("Wiener path does not match dt or K")
    incs = path.block(0, nsteps) if nsteps else np.zeros((0, noise.K))
    state = initial
    states = [state]
    retries = 0
    for s in range(nsteps):
        dW = incs[s]
        try:
            state, r = sys.advance(
                state, dW, dt, config, rng=np.random.default_rng([seed, member, s])
            )
        except SolverFailure as exc:
            exc.step = s
            raise
        retries += r
        for hook in hooks:
            hook(state)
        if (s + 1) % stride == 0:
            states.append(state)
    return TrajectoryRecord(
        grid=initial.grid,
        params=params,
        noise=noise,
        dt=dt,
        stride=stride,
        states=states,
        increments=incs[: (len(states) - 1) * stride],
        seed=seed,
        member=member,
        first_step=initial.step,
        origin=initial.t - initial.step * dt,
        retries=retries,
        symmetric=config.symmetric,
    )


def with_params(record: TrajectoryRecord, **changes) -> TrajectoryRecord:
    return replace(record, **changes)
