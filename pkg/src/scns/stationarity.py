"""Statistical surrogates for stationarity of path laws.

Two views are compared with two-sample Kolmogorov-Smirnov distances:

* marginal view: laws of ``F(U(t))`` and ``F(U(t + tau))`` across an ensemble;
* path view: the same after time-mollification of the trajectory.

Critical values come from a permutation oracle at the actual sample sizes.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dynamics import State, TrajectoryRecord
from .model import ModelParams, NoiseModel
from .spectral import TorusGrid, sobolev12_sq


@dataclass(frozen=True)
class EmpiricalLaw:
    name: str
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).ravel())

    @property
    def count(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class Functional:
    """Named scalar map on states."""

    name: str
    fn: Callable

    def __call__(self, state: State) -> float:
        return float(self.fn(state))


def mass_functional() -> Functional:
    return Functional("mass", lambda s: s.mass)


def energy_functional(params: ModelParams) -> Functional:
    from .diagnostics import total_energy

    return Functional("energy", lambda s: total_energy(s, params))


def velocity_functional() -> Functional:
    return Functional("u_sobolev_sq", lambda s: sobolev12_sq(s.u))


def min_density_functional() -> Functional:
    return Functional("min_rho", lambda s: float(s.rho_samples.min()))


def mode_amplitude_functional(component: int, mode: tuple) -> Functional:
    """|u_hat_component(mode)| for a mode stored in the real-FFT layout."""
    name = f"u{component}_mode_" + "_".join(str(m) for m in mode)

    def amp(s: State) -> float:
        return float(abs(s.u_hat[(component,) + tuple(mode)]))

    return Functional(name, amp)


def standard_functionals(params: ModelParams) -> list:
    return [mass_functional(), energy_functional(params), velocity_functional()]


FUNCTIONAL_NAMES = ("mass", "energy", "u_sobolev_sq", "min_rho")


def functionals_by_name(names, params: ModelParams) -> list:
    table = {
        "mass": mass_functional,
        "energy": lambda: energy_functional(params),
        "u_sobolev_sq": velocity_functional,
        "min_rho": min_density_functional,
    }
    out = []
    for n in names:
        if n not in table:
            raise ValueError(f"unknown functional {n!r}; choose from {FUNCTIONAL_NAMES}")
        out.append(table[n]())
    return out


# ---------------------------------------------------------------- time shift and sampling


def shift(record: TrajectoryRecord, tau: float) -> TrajectoryRecord:
    """Time shift: the returned record's sample at time t is the original at t + tau."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    j = tau / record.sample_dt
    k = int(round(j))
    if abs(j - k) > 1e-9 * max(1.0, j):
        raise ValueError(f"tau={tau} is not a multiple of the sample spacing {record.sample_dt}")
    if k >= len(record.states):
        raise ValueError(f"tau={tau} exceeds the record length")
    if k == 0:
        return record
    return replace(
        record,
        states=record.states[k:],
        increments=record.increments[k * record.stride :],
    )


def marginal_law_samples(ensemble, t: float, F: Functional) -> EmpiricalLaw:
    """Values of F at time t across ensemble members."""
    vals = []
    for rec in ensemble:
        try:
            i = rec.index_of(t)
        except ValueError as exc:
            raise ValueError(f"time {t} not covered by member {rec.member}") from exc
        vals.append(F(rec.states[i]))
    return EmpiricalLaw(F.name, np.array(vals))


def mollifier(s, m: int):
    """Unit-mass bump ``(15 m / 16) (1 - (m s)^2)^2`` supported on ``[-1/m, 1/m]``."""
    s = np.asarray(s, dtype=float)
    y = m * s
    return np.where(np.abs(y) <= 1.0, (15.0 * m / 16.0) * (1.0 - y * y) ** 2, 0.0)


def mollified_state(record: TrajectoryRecord, t: float, m: int) -> State:
    """``int U(s) psi_m(t - s) ds`` by normalised discrete quadrature."""
    times = record.times
    lo, hi = t - 1.0 / m, t + 1.0 / m
    tol = 1e-9 * record.sample_dt
    if lo < times[0] - tol or hi > times[-1] + tol:
        raise ValueError(f"mollifier support [{lo}, {hi}] outside the record")
    sel = np.nonzero((times > lo - tol) & (times < hi + tol))[0]
    w = mollifier(t - times[sel], m)
    w = w / w.sum()
    ref = record.states[sel[0]]
    rho = ref.rho_hat.copy()
    u = ref.u_hat.copy()
    for wi, i in zip(w, sel):
        s = record.states[i]
        if s is ref:
            continue
        rho += wi * (s.rho_hat - ref.rho_hat)
        u += wi * (s.u_hat - ref.u_hat)
    return State(record.grid, t, rho, u, -1)


def mollified_evaluation(record: TrajectoryRecord, t: float, m: int, F: Functional) -> float:
    return F(mollified_state(record, t, m))


# ---------------------------------------------------------------- piecewise-constant embedding


def state_l2_norm(state: State) -> float:
    g = state.grid
    r = state.rho_samples
    u = state.u_samples
    return float(math.sqrt(g.integrate(r**2) + np.sum(g.integrate(u**2))))


@dataclass
class PiecewiseConstantPath:
    """``U~(t) = U(t_i)`` on ``[t_i, t_i + dt)``."""

    values: list
    dt: float
    t0: float = 0.0

    @property
    def end(self) -> float:
        return self.t0 + len(self.values) * self.dt

    def __call__(self, t: float):
        i = int(np.floor((t - self.t0) / self.dt))
        if i < 0 or i >= len(self.values):
            raise ValueError(f"t={t} outside [{self.t0}, {self.end})")
        return self.values[i]

    def integral(self, norm, subdivisions: int = 4) -> float:
        """Midpoint quadrature of ``norm(U~(t))`` on a grid finer than the pieces."""
        h = self.dt / subdivisions
        mids = self.t0 + (np.arange(len(self.values) * subdivisions) + 0.5) * h
        cache = {}
        total = 0.0
        for t in mids:
            v = self(t)
            key = id(v)
            if key not in cache:
                cache[key] = norm(v)
            total += cache[key] * h
        return total


@dataclass
class EmbeddingCheck:
    path: PiecewiseConstantPath
    sample_sum: float
    path_integral: float

    @property
    def defect(self) -> float:
        return abs(self.sample_sum - self.path_integral)


def piecewise_embed(samples, dt: float, norm=state_l2_norm, t0: float = 0.0) -> EmbeddingCheck:
    """Embed samples as a piecewise-constant path and compare both sides of the isometry."""
    samples = list(samples)
    if not samples:
        raise ValueError("at least one sample required")
    path = PiecewiseConstantPath(samples, dt, t0)
    lhs = sum(norm(s) for s in samples) * dt
    rhs = path.integral(norm)
    if abs(lhs - rhs) > 1e-12 * max(1.0, abs(lhs)):
        raise AssertionError(f"isometry violated: {lhs} vs {rhs}")
    return EmbeddingCheck(path, lhs, rhs)


# ---------------------------------------------------------------- Kolmogorov-Smirnov


def ks_distance(law1: EmpiricalLaw, law2: EmpiricalLaw) -> float:
    """Sup distance between the two empirical CDFs."""
    a = np.sort(law1.values)
    b = np.sort(law2.values)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty law")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_critical_value(n1: int, n2: int, alpha: float = 0.01, n_perm: int | None = None, seed: int = 0) -> float:
    """Upper alpha-quantile of the two-sample KS distance under exchangeability.

    KS is rank-based, so random splits of ``n1 + n2`` pooled ranks give its
    exact null law for continuous data. The permutation count grows with
    ``1 / alpha`` so small levels are still resolved.
    """
    if n_perm is None:
        n_perm = max(4000, int(math.ceil(50.0 / alpha)))
    rng = np.random.default_rng([seed, n1, n2])
    n = n1 + n2
    stats = []
    chunk = max(1, min(n_perm, 4_000_000 // n))
    done = 0
    while done < n_perm:
        k = min(chunk, n_perm - done)
        labels = rng.random((k, n)).argsort(axis=1) < n1
        fa = np.cumsum(labels, axis=1) / n1
        fb = np.cumsum(~labels, axis=1) / n2
        stats.append(np.max(np.abs(fa - fb), axis=1))
        done += k
    stats = np.concatenate(stats)
    return float(np.quantile(stats, 1.0 - alpha, method="higher"))


# ---------------------------------------------------------------- reports


@dataclass
class StationarityReport:
    rows: list
    pooled: list
    verdict: str
    burn_in: float
    alpha: float
    notes: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("view,functional,t,tau,distance,n1,n2,critical\n")
        for r in self.rows + self.pooled:
            buf.write(
                f"{r['view']},{r['functional']},{r['t']},{r['tau']},{r['distance']!r},"
                f"{r['n1']},{r['n2']},{r['critical']!r}\n"
            )
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"verdict: {self.verdict}", f"burn-in: {self.burn_in}", f"alpha: {self.alpha}"]
        for r in self.pooled:
            lines.append(
                f"{r['view']:>9} {r['functional']:>14} tau={r['tau']:<6g} "
                f"KS={r['distance']:.4f} critical={r['critical']:.4f}"
            )
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"

    def distance(self, view: str, functional: str, tau: float) -> float:
        for r in self.pooled:
            if r["view"] == view and r["functional"] == functional and abs(r["tau"] - tau) < 1e-12:
                return r["distance"]
        raise KeyError((view, functional, tau))


def _law(ensemble, times, F, m=None):
    vals = []
    for rec in ensemble:
        for t in times:
            if m is None:
                vals.append(F(rec.states[rec.index_of(t)]))
            else:
                vals.append(mollified_evaluation(rec, t, m, F))
    return EmpiricalLaw(F.name, np.array(vals))


def stationarity_report(
    ensemble,
    taus,
    ts,
    functionals,
    *,
    alpha: float = 0.01,
    m: int | None = 16,
    burn_in: float = 0.0,
    min_samples: int = 8,
    threshold: float | None = None,
    n_perm: int | None = None,
) -> StationarityReport:
    """Compare laws at t and t + tau per time (matrix rows) and pooled over ``ts``.

    The verdict is FAIL when a pooled distance exceeds its critical value
    (or ``threshold`` if given) or when a per-time distance exceeds the
    Bonferroni-corrected critical value; INSUFFICIENT when the pooled laws
    have fewer than ``min_samples`` values.
    """
    ensemble = list(ensemble)
    taus = list(taus)
    ts = list(ts)
    views = [("marginal", None)] + ([("mollified", m)] if m else [])
    rows = []
    pooled = []
    crit_cache = {}

    def crit(n1, n2, level):
        key = (n1, n2, level)
        if key not in crit_cache:
            crit_cache[key] = ks_critical_value(n1, n2, level, n_perm) if min(n1, n2) >= 2 else math.nan
        return crit_cache[key]

    n_tests = max(1, len(views) * len(functionals) * len(taus) * len(ts))
    fail = False
    for view, mm in views:
        for F in functionals:
            base = {t: _law(ensemble, [t], F, mm) for t in ts}
            for tau in taus:
                shifted = {t: _law(ensemble, [t + tau], F, mm) for t in ts}
                for t in ts:
                    a, b = base[t], shifted[t]
                    dist = ks_distance(a, b)
                    c = crit(a.count, b.count, alpha / n_tests)
                    rows.append(dict(view=view, functional=F.name, t=t, tau=tau, distance=dist,
                                     n1=a.count, n2=b.count, critical=c))
                    if not math.isnan(c) and dist > c:
                        fail = True
                a = EmpiricalLaw(F.name, np.concatenate([base[t].values for t in ts]))
                b = EmpiricalLaw(F.name, np.concatenate([shifted[t].values for t in ts]))
                dist = ks_distance(a, b)
                c = crit(a.count, b.count, alpha) if threshold is None else threshold
                pooled.append(dict(view=view, functional=F.name, t="pooled", tau=tau, distance=dist,
                                   n1=a.count, n2=b.count, critical=c))
                if not math.isnan(c) and dist > c:
                    fail = True
    n_pooled = len(ensemble) * len(ts)
    notes = []
    if n_pooled < min_samples:
        verdict = "INSUFFICIENT"
        notes.append(f"insufficient samples: {n_pooled} per law (< {min_samples})")
    else:
        verdict = "FAIL" if fail else "PASS"
    return StationarityReport(rows, pooled, verdict, burn_in, alpha, notes)


def krylov_bogoliubov_average(records, T: float, functionals, t0: float | None = None) -> dict:
    """Time-averaged laws: values of each functional at all samples in ``[t0, t0 + T)``.

    ``records`` may be a single record or an ensemble (pooled).
    """
    if isinstance(records, TrajectoryRecord):
        records = [records]
    out = {}
    for F in functionals:
        vals = []
        for rec in records:
            start = rec.times[0] if t0 is None else t0
            i0 = rec.index_of(start)
            count = int(round(T / rec.sample_dt))
            if count <= 0 or i0 + count > len(rec):
                raise ValueError(f"[{start}, {start + T}) not covered by the record")
            vals.extend(F(s) for s in rec.states[i0 : i0 + count])
        out[F.name] = EmpiricalLaw(F.name, np.array(vals))
    return out


# ---------------------------------------------------------------- negative control


def ramp_ensemble(grid: TorusGrid, params: ModelParams, members: int, T: float, sample_dt: float) -> list:
    """Deterministic non-stationary records whose state grows linearly in time."""
    count = int(round(T / sample_dt)) + 1
    base_rho = params.M0 / grid.volume
    x = grid.coords
    shape = np.sin(np.pi * x[0] * 2.0 / grid.L)
    out = []
    states = []
    for i in range(count):
        t = i * sample_dt
        rho = np.full(grid.shape, base_rho * (1.0 + t))
        u = np.zeros((grid.d,) + grid.shape)
        u[0] = t * shape
        states.append(State.from_fields(rho, u, t=t, step=i, grid=grid))
    for k in range(members):
        out.append(
            TrajectoryRecord(
                grid=grid,
                params=params,
                noise=NoiseModel.off(grid.d),
                dt=sample_dt,
                stride=1,
                states=states,
                increments=np.zeros((count - 1, 0)),
                seed=0,
                member=k,
            )
        )
    return out
