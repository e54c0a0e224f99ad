"""INI run configuration with total validation before any compute."""

from __future__ import annotations

import configparser
import hashlib
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import StepperConfig, initial_state
from .model import ModelParams, NoiseModel, ParameterError
from .spectral import TorusGrid


class ConfigError(ValueError):
    """A configuration field violates a constraint."""

    def __init__(self, field_name: str, constraint: str):
        self.field = field_name
        self.constraint = constraint
        super().__init__(f"{field_name}: {constraint}")


SECTIONS = ("grid", "model", "noise", "stepper", "run", "stationarity", "diagnose", "sweep")


@dataclass(frozen=True)
class NoiseSpec:
    family: str = "default"
    A: float = 1.0
    K: int = 8

    def build(self, d: int) -> NoiseModel:
        if self.family == "off" or self.K == 0 or self.A == 0:
            return NoiseModel.off(d)
        return NoiseModel.default(self.K, d, self.A, self.family)


@dataclass(frozen=True)
class RunConfig:
    grid: TorusGrid
    params: ModelParams
    noise: NoiseSpec
    stepper: StepperConfig
    T: float = 1.0
    stride: int = 1
    snapshot_every: int = 1
    seed: int = 0
    initial: str = "rest"
    amplitude: float = 0.1
    out: str = "scns_out"
    ensemble: int = 16
    burn_in: float = 50.0
    taus: tuple = (1.0, 5.0, 10.0)
    times: tuple = (50.0,)
    functionals: tuple = ("mass", "energy", "u_sobolev_sq")
    alpha: float = 0.01
    mollifier_m: int = 16
    threshold: float | None = None
    surrogate: str = "none"
    min_samples: int = 8
    evf_level: str = "epsilon"
    evf_alpha: float = 0.2
    lower_bound_from: float = 1.0
    sweep_axis: str = "epsilon"
    sweep_values: tuple = ()
    text: str = field(default="", repr=False, compare=False)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def noise_model(self) -> NoiseModel:
        return self.noise.build(self.grid.d)

    def initial_state(self):
        g = self.grid
        p = self.params
        rho0 = p.M0 / g.volume
        if self.initial == "rest":
            return initial_state(g, p)
        w = 2.0 * np.pi / g.L
        x = g.coords
        c = np.ones(g.shape)
        for xj in x:
            c = c * np.cos(w * xj)
        rho = rho0 * (1.0 + self.amplitude * c)
        u = np.empty((g.d,) + g.shape)
        for i in range(g.d):
            comp = np.sin(w * x[i])
            for j in range(g.d):
                if j != i:
                    comp = comp * np.cos(w * x[j])
            u[i] = self.amplitude * comp
        return initial_state(g, p, rho=rho, u=u)


def _get(cp, section, key, conv, default):
    name = f"{section}.{key}"
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key).strip()
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"cannot parse {raw!r} ({exc})") from None


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan")
    return v


def _int(s: str) -> int:
    return int(s)


def _bool(s: str) -> bool:
    t = s.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _floats(s: str) -> tuple:
    return tuple(_float(x) for x in s.replace(";", ",").split(",") if x.strip())


def _names(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _require(ok: bool, name: str, rule: str):
    if not ok:
        raise ConfigError(name, rule)


def parse_config(text: str, seed_override: str | None = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", f"malformed configuration ({exc})") from None
    for s in cp.sections():
        if s not in SECTIONS:
            raise ConfigError(s, f"unknown section; expected one of {', '.join(SECTIONS)}")

    d = _get(cp, "grid", "d", _int, 2)
    n = _get(cp, "grid", "n", _int, 16)
    N = _get(cp, "grid", "N", _int, 3)
    L = _get(cp, "grid", "L", _float, 2.0)
    _require(d in (1, 2, 3), "grid.d", "d ∈ {1, 2, 3}")
    _require(n > 0 and n % 2 == 0, "grid.n", "n even and positive")
    _require(N >= 0, "grid.N", "N ≥ 0")
    _require(n >= 2 * (2 * N + 1), "grid.n", "n ≥ 2(2N+1)")
    _require(L > 0, "grid.L", "L > 0")
    grid = TorusGrid(d, n, N, L)

    mk = {}
    for key, default in (
        ("a", 1.0), ("gamma", 2.0), ("mu", 1.0), ("eta", 0.0), ("M0", grid.volume),
        ("eps", 0.1), ("delta", 0.0), ("Gamma", 6.0), ("R", math.inf),
    ):
        mk[key] = _get(cp, "model", key, _float, default)
    mk["level"] = _get(cp, "model", "level", str, "zero")
    try:
        params = ModelParams(**mk)
        params.check_dimension(d)
    except ParameterError as exc:
        raise ConfigError(f"model.{exc.name}", exc.rule) from None

    family = _get(cp, "noise", "family", str, "default")
    _require(family in ("default", "modulated", "off"), "noise.family", "family ∈ {default, modulated, off}")
    A = _get(cp, "noise", "A", _float, 1.0)
    K = _get(cp, "noise", "K", _int, 8)
    _require(A >= 0, "noise.A", "A ≥ 0")
    _require(K >= 0, "noise.K", "K ≥ 0")
    noise = NoiseSpec(family, A, K)

    dt = _get(cp, "stepper", "dt", _float, 1e-2)
    _require(dt > 0, "stepper.dt", "dt > 0")
    retries = _get(cp, "stepper", "max_retries", _int, 4)
    _require(retries >= 0, "stepper.max_retries", "max_retries ≥ 0")
    symmetric = _get(cp, "stepper", "symmetric", _bool, False)
    stepper = StepperConfig(dt=dt, max_retries=retries, symmetric=symmetric)

    T = _get(cp, "run", "T", _float, 1.0)
    _require(T >= 0, "run.T", "T ≥ 0")
    _require(abs(round(T / dt) * dt - T) <= 1e-9 * max(1.0, T), "run.T", "T must be a multiple of dt")
    stride = _get(cp, "run", "stride", _int, 1)
    _require(stride >= 1, "run.stride", "stride ≥ 1")
    snap = _get(cp, "run", "snapshot_every", _int, 1)
    _require(snap >= 1, "run.snapshot_every", "snapshot_every ≥ 1")
    seed = _get(cp, "run", "seed", _int, 0)
    if seed_override not in (None, ""):
        try:
            seed = int(seed_override)
        except ValueError:
            raise ConfigError("SCNS_SEED", f"cannot parse {seed_override!r} as an integer") from None
    _require(seed >= 0, "run.seed", "seed ≥ 0")
    initial = _get(cp, "run", "initial", str, "rest")
    _require(initial in ("rest", "perturbed"), "run.initial", "initial ∈ {rest, perturbed}")
    amplitude = _get(cp, "run", "amplitude", _float, 0.1)
    _require(abs(amplitude) < 1, "run.amplitude", "|amplitude| < 1 keeps the density positive")
    out = _get(cp, "run", "out", str, "scns_out")

    ens = _get(cp, "stationarity", "ensemble", _int, 16)
    _require(ens >= 1, "stationarity.ensemble", "ensemble ≥ 1")
    burn = _get(cp, "stationarity", "burn_in", _float, 50.0)
    _require(burn >= 0, "stationarity.burn_in", "burn_in ≥ 0")
    taus = _get(cp, "stationarity", "taus", _floats, (1.0, 5.0, 10.0))
    _require(len(taus) > 0 and all(t > 0 for t in taus), "stationarity.taus", "taus non-empty and > 0")
    times = _get(cp, "stationarity", "times", _floats, (burn,))
    _require(len(times) > 0 and all(t >= burn for t in times), "stationarity.times", "times ≥ burn_in")
    funcs = _get(cp, "stationarity", "functionals", _names, ("mass", "energy", "u_sobolev_sq"))
    known = ("mass", "energy", "u_sobolev_sq", "min_rho")
    _require(all(f in known for f in funcs), "stationarity.functionals", f"functionals ⊂ {{{', '.join(known)}}}")
    alpha = _get(cp, "stationarity", "alpha", _float, 0.01)
    _require(0 < alpha < 1, "stationarity.alpha", "alpha ∈ (0, 1)")
    m = _get(cp, "stationarity", "mollifier_m", _int, 16)
    _require(m >= 0, "stationarity.mollifier_m", "mollifier_m ≥ 0 (0 disables the path view)")
    threshold = _get(cp, "stationarity", "threshold", _float, None)
    surrogate = _get(cp, "stationarity", "surrogate", str, "none")
    _require(surrogate in ("none", "ramp"), "stationarity.surrogate", "surrogate ∈ {none, ramp}")
    min_samples = _get(cp, "stationarity", "min_samples", _int, 8)

    evf_level = _get(cp, "diagnose", "level", str, "epsilon")
    _require(evf_level in ("epsilon", "delta"), "diagnose.level", "level ∈ {epsilon, delta}")
    evf_alpha = _get(cp, "diagnose", "alpha", _float, 0.2)
    if evf_level == "delta":
        _require(0 < evf_alpha < 1 / 3, "diagnose.alpha", "α ∈ (0, 1/3)")
    lb_from = _get(cp, "diagnose", "lower_bound_from", _float, 1.0)

    axis = _get(cp, "sweep", "axis", str, "epsilon")
    _require(axis in ("epsilon", "delta", "N", "R"), "sweep.axis", "axis ∈ {epsilon, delta, N, R}")
    values = _get(cp, "sweep", "values", _floats, ())

    return RunConfig(
        grid=grid, params=params, noise=noise, stepper=stepper, T=T, stride=stride,
        snapshot_every=snap, seed=seed, initial=initial, amplitude=amplitude, out=out,
        ensemble=ens, burn_in=burn, taus=taus, times=times, functionals=funcs, alpha=alpha,
        mollifier_m=m, threshold=threshold, surrogate=surrogate, min_samples=min_samples,
        evf_level=evf_level, evf_alpha=evf_alpha, lower_bound_from=lb_from,
        sweep_axis=axis, sweep_values=values, text=text,
    )


def load_config(path, env=None) -> RunConfig:
    env = os.environ if env is None else env
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, env.get("SCNS_SEED"))


def with_axis(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    """Copy of ``cfg`` with one sweep axis set to ``value`` (re-validated)."""
    try:
        if axis == "epsilon":
            return replace(cfg, params=replace(cfg.params, eps=float(value)))
        if axis == "delta":
            return replace(cfg, params=replace(cfg.params, delta=float(value)))
        if axis == "R":
            return replace(cfg, params=replace(cfg.params, R=float(value)))
        if axis == "N":
            N = int(round(value))
            if cfg.grid.n < 2 * (2 * N + 1):
                raise ConfigError("sweep.values", f"N={N} needs n ≥ {2 * (2 * N + 1)}")
            return replace(cfg, grid=replace(cfg.grid, N=N))
    except ParameterError as exc:
        raise ConfigError(f"model.{exc.name}", exc.rule) from None
    raise ConfigError("sweep.axis", "axis ∈ {epsilon, delta, N, R}")
