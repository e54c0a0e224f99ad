import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scns.diagnostics import total_energy
from scns.dynamics import (
    GalerkinSystem,
    SingularMass,
    SolverFailure,
    State,
    StepperConfig,
    WienerPath,
    continuity_rhs,
    em_step,
    galerkin_basis,
    galerkin_mass_matrix,
    initial_state,
    momentum_coefficients,
    momentum_rhs_weak,
    recover_velocity,
    simulate,
)
from scns.model import ModelParams, NegativeDensity, NoiseModel, cutoff_H, pressure_samples, stress
from scns.spectral import (
    SpectralField,
    SpectralVectorField,
    TorusGrid,
    h_n_norm,
    random_band_limited,
    symmetry_defect,
    symmetry_project,
)

G = TorusGrid(2, 16, 3)
W = 2 * np.pi / G.L


def single_mode_state(grid=G, a=0.3, b=0.8, c=0.4):
    x, y = grid.coords
    rho = 1 + a * np.cos(W * x) * np.cos(W * y)
    u = np.stack([b * np.sin(W * x) * np.cos(W * y), c * np.sin(2 * W * y) + 0 * x])
    return State.from_fields(rho, u, grid=grid)


def smooth_positive(grid, rng, amp=0.4, bw=3):
    f = random_band_limited(grid, bw, rng).samples
    return 1 + amp * f / np.max(np.abs(f))


# ---------------------------------------------------------------- continuity


def test_continuity_rhs_for_uniform_rest_state():
    p = ModelParams(eps=0.3, M0=4.0)
    c = 0.7
    s = initial_state(G, p, rho=np.full(G.shape, c))
    rhs = continuity_rhs(s, p).samples
    expected = -2 * p.eps * c + cutoff_H(c * G.volume / p.M0) / G.volume
    assert np.max(np.abs(rhs - expected)) < 1e-15


def test_continuity_rhs_without_regularisation_is_transport():
    p = ModelParams(eps=0.0, level="delta")
    x, y = G.coords
    a, b = 0.5, 1.5
    s = State.from_fields(1 + a * np.cos(W * x), np.stack([b * np.sin(W * x), 0 * x]), grid=G)
    # rho u1 = b sin + (a b / 2) sin(2 W x) by hand
    expected = -(b * W * np.cos(W * x) + a * b * W * np.cos(2 * W * x))
    assert np.max(np.abs(continuity_rhs(s, p).samples - expected)) < 1e-13


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.floats(1.0, 10.0))
def test_continuity_rhs_integrates_to_mass_balance(seed, eps, M0):
    rng = np.random.default_rng(seed)
    p = ModelParams(eps=eps, M0=M0)
    u = random_band_limited(G, G.N, rng, components=2).samples
    s = State.from_fields(smooth_positive(G, rng), u, grid=G)
    total = G.integrate(continuity_rhs(s, p).samples)
    expected = -2 * eps * s.mass + cutoff_H(s.mass / M0)
    assert abs(total - expected) < 1e-12 * max(1.0, abs(expected))


# ---------------------------------------------------------------- momentum


def test_rest_state_has_no_momentum_increment():
    p = ModelParams(eps=0.2)
    s = initial_state(G, p, rho=np.full(G.shape, 1.3))
    w = momentum_rhs_weak(s, p, None, None, 0.01)
    assert np.max(np.abs(w.samples)) < 1e-15


def weak_drift_oracle(state, p, h, phi, dphi, lap_phi):
    """Dense quadrature of every drift integral tested against one phi."""
    r = state.rho_samples
    u = state.u_samples
    grid = state.grid
    Ju = np.empty((grid.d, grid.d) + grid.shape)
    for i in range(grid.d):
        c = grid.rfft(u[i])
        for j in range(grid.d):
            Ju[i, j] = grid.irfft(grid.rderiv[j] * c)
    conv = np.einsum("x,jx,ix,ijx->x", r.ravel(), u.reshape(2, -1), u.reshape(2, -1), dphi.reshape(2, 2, -1))
    div_phi = dphi[0, 0] + dphi[1, 1]
    I = grid.integrate
    total = h * I(conv.reshape(grid.shape))
    total += h * I(pressure_samples(r, p) * div_phi)
    total -= I(np.sum(stress(Ju, p) * dphi, axis=(0, 1)))
    total += p.eps * I(np.sum(r * u * lap_phi, axis=0))
    if p.zero_level:
        total -= 2 * p.eps * I(np.sum(r * u * phi, axis=0))
    return total


def test_momentum_increment_matches_quadrature_oracle():
    p = ModelParams(eps=0.15, mu=0.9, eta=0.3, gamma=2.0, delta=0.05, Gamma=6.0)
    s = single_mode_state()
    dt = 0.01
    w = momentum_rhs_weak(s, p, None, None, dt).samples
    x, y = G.coords
    for (k1, k2) in [(1, 0), (1, 1), (0, 2), (2, 1), (3, 3)]:
        ph = W * (k1 * x + k2 * y)
        for i in range(2):
            e = np.zeros((2, 1, 1))
            e[i] = 1
            phi = e * np.cos(ph)
            dphi = np.zeros((2, 2) + G.shape)
            dphi[i, 0] = -W * k1 * np.sin(ph)
            dphi[i, 1] = -W * k2 * np.sin(ph)
            lap = -(W**2) * (k1**2 + k2**2) * phi
            oracle = dt * weak_drift_oracle(s, p, 1.0, phi, dphi, lap)
            got = G.integrate(np.sum(w * phi, axis=0))
            assert abs(got - oracle) < 1e-10 * max(1.0, abs(oracle)), (k1, k2, i)


def test_momentum_increment_in_partial_cutoff_band():
    s = single_mode_state()
    norm = h_n_norm(s.u)
    p = ModelParams(eps=0.1, R=norm - 0.3)
    h = cutoff_H(0.3)
    w = momentum_rhs_weak(s, p, None, None, 1.0).samples
    x, y = G.coords
    phi = np.stack([np.sin(W * x) * np.cos(W * y), 0 * x])
    dphi = np.zeros((2, 2) + G.shape)
    dphi[0, 0] = W * np.cos(W * x) * np.cos(W * y)
    dphi[0, 1] = -W * np.sin(W * x) * np.sin(W * y)
    lap = -2 * W**2 * phi
    oracle = weak_drift_oracle(s, p, h, phi, dphi, lap)
    assert abs(G.integrate(np.sum(w * phi, axis=0)) - oracle) < 1e-10 * abs(oracle)


def test_cutoff_region_keeps_only_stress_and_eps_terms():
    s = single_mode_state(b=3.0, c=2.0)
    p_cut = ModelParams(eps=0.1, R=h_n_norm(s.u) - 1.5)
    p_free = ModelParams(eps=0.1)
    sys = GalerkinSystem(G, p_cut)
    assert sys.velocity_factor(s.u_hat) == 0.0
    w = momentum_rhs_weak(s, p_cut, None, None, 1.0).samples
    r, u = s.rho_samples, s.u_samples
    m_hat = G.rfft(r * u)
    expected_hat = (
        GalerkinSystem(G, p_free).viscous_hat(s.u_hat)
        - p_free.eps * G.rk2 * m_hat
        - 2 * p_free.eps * m_hat
    ) * G.rmask
    assert np.max(np.abs(w - G.irfft(expected_hat))) < 1e-12


def test_noise_part_of_momentum_increment():
    p = ModelParams(eps=0.1)
    nm = NoiseModel.default(3, 2)
    s = single_mode_state()
    dW = np.array([0.1, -0.2, 0.05])
    w_noise = momentum_rhs_weak(s, p, nm, dW, 0.0).samples
    r = s.rho_samples
    gk = nm.coefficients(G, r)
    proj = G.irfft(G.rfft(gk) * G.rmask)
    x, y = G.coords
    for k1, k2 in [(1, 0), (0, 1), (2, 3)]:
        phi = np.stack([np.sin(W * (k1 * x + k2 * y)), np.cos(W * k2 * y)])
        oracle = sum(dw * G.integrate(np.sum(r * proj[k] * phi, axis=0)) for k, dw in enumerate(dW))
        assert abs(G.integrate(np.sum(w_noise * phi, axis=0)) - oracle) < 1e-12


# ---------------------------------------------------------------- velocity recovery


def test_unit_density_mass_matrix_is_identity():
    rho = SpectralField.from_samples(G, np.ones(G.shape))
    M = galerkin_mass_matrix(rho)
    assert M.shape == (2 * (2 * G.N + 1) ** 2,) * 2
    assert np.max(np.abs(M - np.eye(len(M)))) < 1e-13


def test_basis_is_orthonormal():
    B = galerkin_basis(G).reshape(-1, G.n**2)
    gram = B @ B.T * G.cell
    assert np.max(np.abs(gram - np.eye(len(B)))) < 1e-13


def test_unit_density_recovers_momentum_itself():
    u = random_band_limited(G, G.N, np.random.default_rng(0), components=2)
    rho = SpectralField.from_samples(G, np.ones(G.shape))
    out = recover_velocity(rho, u)
    assert np.max(np.abs(out.samples - u.samples)) < 1e-12


def test_constant_density_scales_momentum():
    m = random_band_limited(G, G.N, np.random.default_rng(1), components=2)
    rho = SpectralField.from_samples(G, np.full(G.shape, 2.5))
    assert np.max(np.abs(recover_velocity(rho, m).samples - m.samples / 2.5)) < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_velocity_round_trip_through_momentum(seed):
    rng = np.random.default_rng(seed)
    rho = SpectralField.from_samples(G, smooth_positive(G, rng, amp=0.8))
    u = random_band_limited(G, G.N, rng, components=2)
    back = recover_velocity(rho, momentum_coefficients(rho, u))
    assert np.max(np.abs(back.samples - u.samples)) < 1e-10 * np.max(np.abs(u.samples))


def test_dense_mass_matrix_agrees_with_iterative_solve():
    rng = np.random.default_rng(3)
    rho = SpectralField.from_samples(G, smooth_positive(G, rng, amp=0.6))
    u = random_band_limited(G, G.N, rng, components=2)
    B = galerkin_basis(G).reshape(-1, G.n**2)
    m = momentum_coefficients(rho, u).samples
    rhs = np.concatenate([B @ m[i].ravel() * G.cell for i in range(2)])
    coef = np.linalg.solve(galerkin_mass_matrix(rho), rhs)
    k = len(B)
    dense_u = np.stack([(coef[i * k : (i + 1) * k] @ B).reshape(G.shape) for i in range(2)])
    assert np.max(np.abs(dense_u - u.samples)) < 1e-10


def test_near_vacuum_is_singular():
    r = np.ones(G.shape)
    r[0, 0] = 1e-14
    with pytest.raises(SingularMass):
        recover_velocity(SpectralField.from_samples(G, r), SpectralVectorField.zeros(G))


# ---------------------------------------------------------------- stepping


def test_rest_state_is_a_fixed_point():
    p = ModelParams(eps=0.0, M0=4.0)
    s = initial_state(G, p)
    out = em_step(s, p, None, StepperConfig(dt=0.01), None)
    assert np.array_equal(out.rho_hat, s.rho_hat)
    assert np.max(np.abs(out.u_hat)) == 0.0
    assert out.t == pytest.approx(0.01)


def test_mean_density_follows_scalar_implicit_euler_exactly():
    p = ModelParams(eps=0.2, M0=3.0)
    nm = NoiseModel.default(4, 2)
    s = single_mode_state()
    dt = 0.01
    rec = simulate(s, 0.5, p, nm, StepperConfig(dt=dt), seed=3)
    m = s.mean_density
    vol = G.volume
    for st_ in rec.states[1:]:
        m = (m + dt * cutoff_H(m * vol / p.M0) / vol) / (1 + 2 * p.eps * dt)
        assert abs(st_.mean_density - m) < 1e-12


def test_velocity_stays_in_galerkin_space():
    p = ModelParams(eps=0.1)
    rec = simulate(single_mode_state(), 0.2, p, NoiseModel.default(8, 2), StepperConfig(dt=0.01), seed=1)
    outside = 1 - G.rmask
    for s in rec.states:
        assert np.max(np.abs(s.u_hat * outside)) == 0.0


def test_symmetric_data_stay_symmetric_with_parity_noise():
    p = ModelParams(eps=0.1)
    rng = np.random.default_rng(8)
    rho0 = SpectralField.from_samples(G, smooth_positive(G, rng))
    u0 = random_band_limited(G, G.N, rng, components=2) * 0.3
    rho, u = symmetry_project(rho0, u0)
    s = State.from_fields(rho, u, grid=G)
    rec = simulate(s, 2.0, p, NoiseModel.default(8, 2), StepperConfig(dt=0.01), seed=2, stride=20)
    assert max(symmetry_defect(x.rho, x.u) for x in rec.states) < 1e-10


def test_symmetric_mode_projects_asymmetric_data_and_keeps_mean():
    p = ModelParams(eps=0.1)
    rng = np.random.default_rng(9)
    s = State.from_fields(smooth_positive(G, rng), random_band_limited(G, G.N, rng, components=2).samples * 0.1, grid=G)
    cfg = StepperConfig(dt=0.01, symmetric=True)
    out = em_step(s, p, None, cfg, None)
    plain = em_step(s, p, None, StepperConfig(dt=0.01), None)
    assert symmetry_defect(out.rho, out.u) < 1e-12
    assert out.rho_hat.flat[0] == plain.rho_hat.flat[0]


def test_negative_density_triggers_halving_retry():
    p = ModelParams(eps=0.0, M0=4.0)
    s = initial_state(G, p, rho=lambda x, y: 1 + 0.9 * np.cos(W * x) + 0 * y, u=lambda x, y: (3 * np.sin(W * x) + 0 * y, 0 * x))
    sys = GalerkinSystem(G, p)
    with pytest.raises(NegativeDensity):
        sys.step(s, np.zeros(0), 0.2, StepperConfig(dt=0.2))
    out, retries = sys.advance(s, np.zeros(0), 0.2, StepperConfig(dt=0.2))
    assert retries >= 1
    assert out.t == pytest.approx(0.2)
    assert out.step == 1
    assert out.rho_samples.min() > 0


def test_retry_limit_gives_solver_failure():
    p = ModelParams(eps=0.0, M0=4.0)
    s = initial_state(G, p, rho=lambda x, y: 1 + 0.9 * np.cos(W * x) + 0 * y, u=lambda x, y: (3 * np.sin(W * x) + 0 * y, 0 * x))
    with pytest.raises(SolverFailure) as err:
        em_step(s, p, None, StepperConfig(dt=0.2, max_retries=0), None)
    assert err.value.state is s


def test_stepper_config_requires_positive_dt():
    with pytest.raises(ValueError):
        StepperConfig(dt=0.0)


# ---------------------------------------------------------------- Wiener paths


def test_wiener_path_is_regenerated_bit_identically():
    a = WienerPath(42, 5, 1e-3, member=2).block(0, 1000)
    b = WienerPath(42, 5, 1e-3, member=2).block(0, 1000)
    assert a.tobytes() == b.tobytes()


def test_wiener_path_random_access_matches_sequential():
    p = WienerPath(7, 3, 0.01)
    seq = p.block(0, 600)
    assert np.array_equal(WienerPath(7, 3, 0.01).increments(517), seq[517])
    assert np.array_equal(WienerPath(7, 3, 0.01).block(250, 20), seq[250:270])


def test_coarsened_path_sums_fine_increments():
    fine = WienerPath(1, 4, 1e-3)
    coarse = fine.coarsened(4)
    assert coarse.step_dt == pytest.approx(4e-3)
    f = fine.block(0, 400).reshape(100, 4, 4).sum(axis=1)
    assert np.allclose(coarse.block(0, 100), f, rtol=0, atol=1e-15)


def test_wiener_increments_have_the_right_law():
    dt = 0.01
    z = WienerPath(3, 4, dt).block(0, 50_000)
    assert np.allclose(z.mean(axis=0), 0, atol=5 * np.sqrt(dt / 50_000))
    assert np.allclose(z.var(axis=0), dt, rtol=0.03)
    corr = np.corrcoef(z.T)
    assert np.max(np.abs(corr - np.eye(4))) < 0.03
    lag = np.corrcoef(z[:-1, 0], z[1:, 0])[0, 1]
    assert abs(lag) < 0.03


def test_members_have_distinct_streams():
    a = WienerPath(5, 2, 1.0, member=0).block(0, 10)
    b = WienerPath(5, 2, 1.0, member=1).block(0, 10)
    assert not np.allclose(a, b)


# ---------------------------------------------------------------- trajectories


def test_zero_horizon_keeps_only_the_initial_state():
    p = ModelParams()
    s = initial_state(G, p)
    rec = simulate(s, 0.0, p, None, StepperConfig(dt=0.01))
    assert len(rec) == 1
    assert rec.states[0] is s
    assert rec.increments.shape == (0, 0)


def test_same_seed_gives_identical_trajectories():
    p = ModelParams(eps=0.1)
    nm = NoiseModel.default(8, 2)
    runs = [simulate(single_mode_state(), 0.3, p, nm, StepperConfig(dt=0.01), seed=9, stride=3) for _ in range(2)]
    for a, b in zip(runs[0].states, runs[1].states):
        assert a.rho_hat.tobytes() == b.rho_hat.tobytes()
        assert a.u_hat.tobytes() == b.u_hat.tobytes()
    assert runs[0].increments.tobytes() == runs[1].increments.tobytes()


def test_record_times_and_increments_follow_the_stride():
    p = ModelParams()
    rec = simulate(single_mode_state(), 0.3, p, NoiseModel.default(2, 2), StepperConfig(dt=0.01), stride=5)
    assert np.allclose(rec.times, np.arange(7) * 0.05)
    assert rec.increments.shape == (30, 2)
    assert rec.index_of(0.25) == 5
    assert rec.step_increments(1).shape == (5, 2)
    with pytest.raises(ValueError):
        rec.index_of(0.27)


def test_horizon_must_be_a_multiple_of_dt():
    with pytest.raises(ValueError):
        simulate(single_mode_state(), 0.015, ModelParams(), None, StepperConfig(dt=0.01))


def test_hooks_see_every_step():
    seen = []
    simulate(single_mode_state(), 0.05, ModelParams(), None, StepperConfig(dt=0.01), hooks=[lambda s: seen.append(s.step)])
    assert seen == [1, 2, 3, 4, 5]


def test_acoustic_energy_is_non_increasing_up_to_time_step_error():
    p = ModelParams(eps=0.0, M0=4.0)
    violation = []
    for dt in (2e-3, 1e-3):
        s = initial_state(G, p, rho=lambda x, y: 1 + 0.01 * np.cos(W * x) * np.cos(W * y))
        rec = simulate(s, 1.0, p, None, StepperConfig(dt=dt), stride=int(round(0.01 / dt)))
        E = np.array([total_energy(x, p) for x in rec.states])
        assert E[-1] < E[0]
        violation.append(max(0.0, float(np.max(np.diff(E)))))
    assert violation[0] < 1e-3 * 2e-3
    assert violation[1] <= violation[0]
