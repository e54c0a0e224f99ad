"""The twelve acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest

from oracles import single_mode_flux_rates
from scns.cli import main
from scns.diagnostics import (
    density_lower_bound,
    effective_viscous_flux_report,
    energy_balance_residual,
    flux_rates,
    korn_poincare_ratio,
    korn_poincare_sweep,
    mass_ode_residual,
    random_symmetric_velocity,
)
from scns.dynamics import State, StepperConfig, WienerPath, initial_state, simulate
from scns.model import ModelParams, NoiseModel, cutoff_H, solve_M_epsilon
from scns.spectral import (
    SpectralField,
    TorusGrid,
    dealias_product,
    inv_laplacian,
    laplacian,
    random_band_limited,
    riesz_double,
    symmetry_defect,
    symmetry_project,
)
from scns.stationarity import (
    energy_functional,
    functionals_by_name,
    krylov_bogoliubov_average,
    ks_distance,
    mollified_evaluation,
    piecewise_embed,
    ramp_ensemble,
    shift,
    stationarity_report,
)

DESK = TorusGrid(2, 36, 8)
W = np.pi  # 2 pi / L with L = 2


def single_mode(grid, a=0.3, b=0.8, c=0.5):
    x, y = grid.coords
    rho = 1 + a * np.cos(W * x) * np.cos(W * y)
    u = np.stack([b * np.sin(W * x) * np.cos(W * y), c * np.sin(2 * W * y) + 0 * x])
    return rho, u


def bisect_equilibrium(eps, M0):
    lo, hi = 0.0, M0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 2 * eps * mid - cutoff_H(mid / M0) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------- 1, 2: mass


def test_01_mass_ode_fidelity(criterion):
    with criterion(1, "mass ODE fidelity") as info:
        g = TorusGrid(2, 16, 3)
        p = ModelParams(eps=0.1, M0=8.0)
        dt = 1e-3
        start = time.perf_counter()
        rec = simulate(initial_state(g, p), 10.0, p, NoiseModel.default(8, 2), StepperConfig(dt=dt), seed=1, stride=100)
        err = mass_ode_residual(rec)
        elapsed = time.perf_counter() - start
        info["detail"] = f"max error {err:.2e} < {10 * dt:.0e}, {elapsed:.1f}s"
        assert rec.times[-1] == pytest.approx(10.0)
        assert err < 10 * dt
        assert elapsed < 60


def test_02_mass_equilibrium(criterion):
    with criterion(2, "mass equilibrium") as info:
        assert bisect_equilibrium(0.5, 1.0) == pytest.approx(0.5, abs=1e-14)
        assert solve_M_epsilon(0.5, 1.0) == pytest.approx(0.5, abs=1e-14)
        g = TorusGrid(2, 16, 3)
        p = ModelParams(eps=0.1, M0=8.0)
        Meps = bisect_equilibrium(p.eps, p.M0)
        assert solve_M_epsilon(p.eps, p.M0) == pytest.approx(Meps, abs=1e-12)
        rec = simulate(initial_state(g, p), 50.0, p, NoiseModel.default(8, 2), StepperConfig(dt=0.01), seed=2, stride=500)
        gap = abs(rec.states[-1].mass - Meps)
        info["detail"] = f"|M(50) - M_eps| = {gap:.1e}, M_eps(0.5, 1) = 0.5"
        assert gap < 1e-3


# ---------------------------------------------------------------- 3: symmetry


def test_03_symmetry_preservation(criterion):
    with criterion(3, "symmetry preservation") as info:
        p = ModelParams(eps=0.1, M0=4.0)
        rng = np.random.default_rng(0)
        f = random_band_limited(DESK, 4, rng).samples
        rho0 = SpectralField.from_samples(DESK, 1.0 + 0.3 * f / np.abs(f).max())
        u0 = random_band_limited(DESK, 8, rng, components=2) * 0.5
        rho, u = symmetry_project(rho0, u0)
        s0 = State.from_fields(rho, u, grid=DESK)
        assert symmetry_defect(s0.rho, s0.u) < 1e-12
        start = time.perf_counter()
        rec = simulate(s0, 1.0, p, NoiseModel.default(8, 2), StepperConfig(dt=1e-3, symmetric=False), seed=5, stride=100)
        elapsed = time.perf_counter() - start
        defect = max(symmetry_defect(s.rho, s.u) for s in rec.states)
        info["detail"] = f"max defect {defect:.1e} over {rec.states[-1].step} steps, {elapsed:.1f}s"
        assert rec.states[-1].step == 1000
        assert defect < 1e-10
        assert elapsed < 120


# ---------------------------------------------------------------- 4: energy balance


def test_04_discrete_energy_balance(criterion):
    with criterion(4, "discrete energy balance") as info:
        g = TorusGrid(2, 24, 5)
        p = ModelParams(eps=0.1, M0=4.0, R=5.0)
        rho, u = single_mode(g)
        s0 = initial_state(g, p, rho=rho, u=u)
        dts = (4e-3, 2e-3, 1e-3)
        quiet = [abs(energy_balance_residual(simulate(s0, 0.4, p, None, StepperConfig(dt=dt))).residual) for dt in dts]
        noise = NoiseModel.default(8, 2)
        noisy = []
        for dt in dts:
            res = []
            for k in range(8):
                path = WienerPath(3, noise.K, 1e-3, k).coarsened(int(round(dt / 1e-3)))
                rec = simulate(s0, 0.4, p, noise, StepperConfig(dt=dt), member=k, path=path)
                res.append(abs(energy_balance_residual(rec).residual))
            noisy.append(float(np.mean(res)))
        ratios = [quiet[i] / quiet[i + 1] for i in range(2)]
        info["detail"] = (
            f"noise-off {' -> '.join(f'{r:.3f}' for r in quiet)} (ratios {ratios[0]:.2f}, {ratios[1]:.2f}); "
            f"noisy mean |res| {' -> '.join(f'{r:.3f}' for r in noisy)}"
        )
        assert all(1.5 <= r <= 3.0 for r in ratios)
        assert noisy[0] > noisy[1] > noisy[2]


# ---------------------------------------------------------------- 5: spectral exactness


def _convolve(grid, a, b):
    n, h = grid.n, grid.n // 2
    ms = list(itertools.product(range(-h + 1, h), repeat=grid.d))
    nz_a = [(m, a[tuple(x % n for x in m)]) for m in ms if abs(a[tuple(x % n for x in m)]) > 0]
    nz_b = [(m, b[tuple(x % n for x in m)]) for m in ms if abs(b[tuple(x % n for x in m)]) > 0]
    out = np.zeros_like(a)
    for ma, ca in nz_a:
        for mb, cb in nz_b:
            m = tuple(x + y for x, y in zip(ma, mb))
            if max(abs(x) for x in m) < h:
                out[tuple(x % n for x in m)] += ca * cb
    return out


def test_05_spectral_exactness(criterion):
    with criterion(5, "spectral operator exactness") as info:
        rng = np.random.default_rng(12)
        f = random_band_limited(DESK, DESK.N, rng)
        lap_err = np.max(np.abs(laplacian(inv_laplacian(f)).samples - (f.samples - f.mean)))
        R = riesz_double(f)
        trace_err = np.max(np.abs(sum(R[i, i] for i in range(DESK.d)) - (f.samples - f.mean)))
        small = TorusGrid(2, 20, 4)
        a = random_band_limited(small, 6, rng)
        b = random_band_limited(small, 6, rng)
        inner = np.max(np.abs(small.mode_index), axis=0) < small.n // 2
        conv_err = np.max(np.abs(dealias_product(a, b).modes - _convolve(small, a.modes, b.modes))[inner])
        info["detail"] = f"Laplacian {lap_err:.1e}, Riesz trace {trace_err:.1e}, dealiased product {conv_err:.1e}"
        assert lap_err < 1e-12 and trace_err < 1e-12 and conv_err < 1e-12


# ---------------------------------------------------------------- 6: density positivity


def test_06_density_positivity(criterion):
    with criterion(6, "density positivity") as info:
        p = ModelParams(eps=0.1, M0=4.0, R=5.0)
        rho, u = single_mode(DESK)
        floor = []

        def watch(state):
            if state.t >= 1.0 - 1e-12:
                floor.append(float(state.rho_samples.min()))

        rec = simulate(initial_state(DESK, p, rho=rho, u=u), 20.0, p, NoiseModel.default(8, 2), StepperConfig(dt=0.01),
                       seed=2, stride=10, hooks=(watch,))
        rep = density_lower_bound(rec, 1.0)
        info["detail"] = (
            f"min rho {min(floor):.3f} over every step in [1, 20], bound {rep.bound:.4f} "
            f"(D = {rep.divergence:.2f}), ratio {rep.ratio:.2f}"
        )
        assert len(floor) >= 1900
        assert min(floor) > 0
        assert rep.min_rho > 0
        assert 0.1 <= rep.ratio <= 10.0


# ---------------------------------------------------------------- 7: Korn-Poincare


def test_07_korn_poincare(criterion):
    with criterion(7, "Korn-Poincare") as info:
        cube = TorusGrid(3, 12, 2)
        p = ModelParams(mu=1.0, eta=0.0)
        ratios = korn_poincare_sweep(cube, p, np.random.default_rng(7), count=100)
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(20):
            u = random_symmetric_velocity(cube, 2, rng)
            r0 = korn_poincare_ratio(u, p)
            for lam in (1e-3, -2.5, 17.0, 1e4):
                worst = max(worst, abs(korn_poincare_ratio(u * lam, p) - r0) / r0)
        info["detail"] = f"empirical c_KP = {ratios.min():.4f} over {len(ratios)} fields, scale defect {worst:.1e}"
        assert len(ratios) == 100 and ratios.min() > 0
        assert worst <= 1e-12


# ---------------------------------------------------------------- 8, 9: long-run ensemble


@pytest.fixture(scope="module")
def stationary_ensemble():
    g = TorusGrid(2, 16, 3)
    p = ModelParams(eps=0.1, M0=4.0)
    noise = NoiseModel.default(8, 2)
    start = time.perf_counter()
    ens = [simulate(initial_state(g, p), 250.0, p, noise, StepperConfig(dt=0.02), seed=11, member=k, stride=5)
           for k in range(16)]
    return p, ens, time.perf_counter() - start


def test_08_krylov_bogoliubov(criterion, stationary_ensemble):
    with criterion(8, "Krylov-Bogoliubov stabilization") as info:
        p, ens, sim_time = stationary_ensemble
        start = time.perf_counter()
        F = functionals_by_name(["energy", "mass", "u_sobolev_sq"], p)
        short = krylov_bogoliubov_average(ens, 100.0, F, t0=50.0)
        long = krylov_bogoliubov_average(ens, 200.0, F, t0=50.0)
        d = {k: ks_distance(short[k], long[k]) for k in short}
        total = sim_time + time.perf_counter() - start
        info["detail"] = (
            f"KS energy {d['energy']:.4f} (mass {d['mass']:.4f}, |u|^2 {d['u_sobolev_sq']:.4f}) "
            f"from {short['energy'].count} vs {long['energy'].count} samples, {total:.0f}s"
        )
        assert d["energy"] < 0.05
        assert total < 300


def test_09_stationarity_report(criterion, stationary_ensemble):
    with criterion(9, "stationarity report") as info:
        p, ens, _ = stationary_ensemble
        F = functionals_by_name(["mass", "energy", "u_sobolev_sq"], p)
        ts = [50.0 + 5.0 * i for i in range(38)]
        rep = stationarity_report(ens, [1.0, 5.0, 10.0], ts, F, alpha=0.01, m=4, burn_in=50.0)
        marginal = [r for r in rep.pooled if r["view"] == "marginal"]
        worst = max(marginal, key=lambda r: r["distance"] / r["critical"])
        ramp = ramp_ensemble(ens[0].grid, p, 16, 235.0 + 10.0, ens[0].sample_dt)
        ramp_rep = stationarity_report(ramp, [1.0, 5.0, 10.0], ts, F[:1], alpha=0.01, m=None)
        # every per-time law of the ramp is a point mass at t, disjoint from the one at t + tau
        ramp_d = [r["distance"] for r in ramp_rep.rows]
        info["detail"] = (
            f"verdict {rep.verdict}, worst D2 KS {worst['distance']:.4f} ({worst['functional']}, tau={worst['tau']:g}) "
            f"vs critical {worst['critical']:.4f} at n={worst['n1']}; ramp distances {min(ramp_d):.0f}"
        )
        assert len(marginal) == 9
        assert all(r["n1"] == 16 * len(ts) for r in marginal)
        assert all(r["distance"] < r["critical"] for r in marginal)
        assert rep.verdict == "PASS"
        assert ramp_rep.verdict == "FAIL" and all(d == 1.0 for d in ramp_d)


# ---------------------------------------------------------------- 10: appendix machinery


def test_10_appendix_machinery(criterion):
    with criterion(10, "appendix machinery") as info:
        g = TorusGrid(2, 16, 3)
        p = ModelParams(eps=0.1)
        rho, u = single_mode(g)
        smooth = simulate(initial_state(g, p, rho=rho, u=u), 1.0, p, None, StepperConfig(dt=1e-3))
        chk = piecewise_embed(smooth.states, smooth.sample_dt)
        F = energy_functional(p)
        direct = F(smooth.states[smooth.index_of(0.5)])
        errs = [abs(mollified_evaluation(smooth, 0.5, m, F) - direct) for m in (4, 16, 64)]
        noisy = simulate(initial_state(g, p, rho=rho, u=u), 1.0, p, NoiseModel.default(8, 2), StepperConfig(dt=0.01), seed=4)
        a = shift(shift(noisy, 0.2), 0.3)
        b = shift(noisy, 0.5)
        bitwise = len(a) == len(b) and all(
            np.array_equal(x.rho_hat, y.rho_hat) and np.array_equal(x.u_hat, y.u_hat) for x, y in zip(a.states, b.states)
        ) and np.array_equal(a.increments, b.increments)
        info["detail"] = (
            f"isometry defect {chk.defect:.1e}, mollifier errors {errs[0]:.1e} > {errs[1]:.1e} > {errs[2]:.1e}, "
            f"shift semigroup bitwise {bitwise}"
        )
        assert chk.defect <= 1e-12 * max(1.0, chk.sample_sum)
        assert errs[0] > errs[1] > errs[2]
        assert bitwise


# ---------------------------------------------------------------- 11: effective viscous flux


def test_11_effective_viscous_flux(criterion):
    with criterion(11, "effective viscous flux") as info:
        g = TorusGrid(2, 16, 3)
        worst = 0.0
        for gamma in (2.0, 1.4):
            p = ModelParams(eps=0.1, gamma=gamma, mu=1.3, eta=0.4, M0=8.0)
            rho, u = single_mode(g)
            F, rates, _ = flux_rates(State.from_fields(rho, u, grid=g), p, None, "epsilon")
            F_ref, ref = single_mode_flux_rates(0.3, 0.8, 0.5, g.L, g.N, p)
            worst = max([worst, abs(F - F_ref)] + [abs(rates[k] - v) for k, v in ref.items()])
        p = ModelParams(eps=0.1, M0=8.0)
        rho, u = single_mode(g)
        s0 = initial_state(g, p, rho=rho, u=u)
        res = [abs(effective_viscous_flux_report(simulate(s0, 0.2, p, None, StepperConfig(dt=dt))).residual)
               for dt in (2e-3, 1e-3)]
        short = simulate(s0, 0.02, ModelParams(level="delta", delta=0.1), None, StepperConfig(dt=0.01))
        rejected = 0
        for alpha in (1 / 3, 0.5, 1.0):
            with pytest.raises(ValueError, match=r"α ∈ \(0, 1/3\)"):
                effective_viscous_flux_report(short, level="delta", alpha=alpha)
            rejected += 1
        effective_viscous_flux_report(short, level="delta", alpha=0.3)
        info["detail"] = (
            f"oracle gap {worst:.1e}, residual {res[0]:.2e} -> {res[1]:.2e}, rejected {rejected} alphas >= 1/3"
        )
        assert worst < 1e-8
        assert res[1] < res[0]


# ---------------------------------------------------------------- 12: reproducibility


REPRO = """
[grid]
d = 2
n = 16
N = 3
[model]
eps = 0.1
[noise]
K = 8
A = 1.0
[stepper]
dt = 0.01
[run]
T = 0.5
seed = 21
initial = perturbed
"""


def test_12_reproducibility(criterion, tmp_path):
    with criterion(12, "reproducibility") as info:
        cfg = tmp_path / "run.ini"
        cfg.write_text(REPRO)
        outs = [tmp_path / "first", tmp_path / "second"]
        for out in outs:
            assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
            assert main(["diagnose", "--run", str(out)]) == 0
        files = [
            {str(p.relative_to(o)): p.read_bytes() for p in sorted(o.rglob("*")) if p.is_file() and p.name != "manifest.json"}
            for o in outs
        ]
        info["detail"] = f"{len(files[0])} files byte-identical"
        assert set(files[0]) == set(files[1])
        assert any(k.startswith("reports/") for k in files[0]) and "trajectory.csv" in files[0]
        assert files[0] == files[1]
