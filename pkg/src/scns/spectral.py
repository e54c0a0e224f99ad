"""Fourier machinery on the periodic torus [0, L)^d.

Features:
  - ``TorusGrid``: collocation grid, wavenumber tables and the Galerkin mask.
  - ``SpectralField`` / ``SpectralVectorField``: real fields with lazily
    synchronised sample and mode representations.
  - Galerkin projection, inverse Laplacian and the Riesz family of
    Fourier multipliers.
  - Zero-padded products, trapezoid norms and the reflection symmetry class.

Mode convention: ``modes = fftn(samples) / n**d`` so a constant field ``c`` has
``modes[0, ..., 0] == c``. First-derivative multipliers vanish on the Nyquist
plane, which keeps every odd-order operator real and skew-adjoint on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
from scipy import fft as sfft


class GridMismatch(ValueError):
    """Operands live on different grids."""


@dataclass(frozen=True)
class TorusGrid:
    """Uniform collocation grid with a Galerkin cutoff.

    Args:
        d: spatial dimension (1, 2 or 3).
        n: points per axis, even.
        N: Galerkin cutoff, modes with ``|m|_inf <= N`` span H_N.
        L: side length of the torus.
    """

    d: int
    n: int
    N: int
    L: float = 2.0

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"d must be 1, 2 or 3, got {self.d}")
        if self.n % 2:
            raise ValueError(f"n must be even, got {self.n}")
        if self.N < 0:
            raise ValueError("N must be non-negative")
        if self.n < 2 * (2 * self.N + 1):
            raise ValueError(
                f"n >= 2(2N+1) required for dealiased products: n={self.n}, N={self.N}"
            )
        if not self.L > 0:
            raise ValueError("L must be positive")

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def axes(self) -> tuple:
        return tuple(range(-self.d, 0))

    @property
    def volume(self) -> float:
        return float(self.L) ** self.d

    @property
    def cell(self) -> float:
        return (float(self.L) / self.n) ** self.d

    @cached_property
    def coords(self) -> list:
        """Broadcastable coordinate arrays ``x_j = j L / n``."""
        x = np.arange(self.n) * (self.L / self.n)
        return list(np.meshgrid(*([x] * self.d), indexing="ij"))

    @cached_property
    def mode_index(self) -> np.ndarray:
        """Integer wavevectors, shape ``(d, n, ..., n)``, Nyquist stored as -n/2."""
        m = np.fft.fftfreq(self.n, 1.0 / self.n).round().astype(int)
        return np.array(np.meshgrid(*([m] * self.d), indexing="ij"))

    @cached_property
    def _kfull(self) -> np.ndarray:
        return self.mode_index * (2.0 * np.pi / self.L)

    @cached_property
    def _kodd(self) -> np.ndarray:
        k = self._kfull.copy()
        k[self.mode_index == -self.n // 2] = 0.0
        return k

    @cached_property
    def k2(self) -> np.ndarray:
        """|k|^2 with k = 2 pi m / L; the Laplacian multiplier is -k2."""
        return np.sum(self._kfull**2, axis=0)

    @cached_property
    def deriv(self) -> np.ndarray:
        """First-derivative multipliers ``i k_j`` (Nyquist plane zeroed)."""
        return 1j * self._kodd

    def second_deriv(self, i: int, j: int) -> np.ndarray:
        """Multiplier of d_i d_j; the diagonal keeps the Nyquist mode."""
        if i == j:
            return -self._kfull[i] ** 2
        return -self._kodd[i] * self._kodd[j]

    @cached_property
    def inv_k2(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        return out

    @cached_property
    def galerkin_mask(self) -> np.ndarray:
        return np.max(np.abs(self.mode_index), axis=0) <= self.N

    def mask(self, N: int) -> np.ndarray:
        if N > self.n // 2:
            raise ValueError(f"projection order N={N} exceeds grid resolution n/2={self.n // 2}")
        return np.max(np.abs(self.mode_index), axis=0) <= N

    # rfft layout helpers used by the time stepper
    @cached_property
    def rshape(self) -> tuple:
        return self.shape[:-1] + (self.n // 2 + 1,)

    def _rslice(self, a):
        return a[..., : self.n // 2 + 1]

    @cached_property
    def rk2(self) -> np.ndarray:
        return self._rslice(self.k2)

    @cached_property
    def rderiv(self) -> np.ndarray:
        # the last-axis Nyquist in the rfft layout is stored at +n/2
        return self._rslice(self.deriv)

    @cached_property
    def rmask(self) -> np.ndarray:
        return self._rslice(self.galerkin_mask)

    @cached_property
    def rweight(self) -> np.ndarray:
        """Multiplicity of each rfft coefficient in the full spectrum."""
        w = np.full(self.rshape, 2.0)
        w[..., 0] = 1.0
        w[..., -1] = 1.0
        return w

    def rfft(self, a: np.ndarray) -> np.ndarray:
        return sfft.rfftn(a, axes=self.axes) / self.n**self.d

    def irfft(self, c: np.ndarray) -> np.ndarray:
        return sfft.irfftn(c * self.n**self.d, s=self.shape, axes=self.axes)

    def integrate(self, a: np.ndarray) -> np.ndarray:
        """Trapezoid quadrature over the last ``d`` axes."""
        return np.sum(a, axis=self.axes) * self.cell


def _fft(grid: TorusGrid, a: np.ndarray) -> np.ndarray:
    return sfft.fftn(a, axes=grid.axes) / grid.n**grid.d


def _ifft(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    return sfft.ifftn(c * grid.n**grid.d, axes=grid.axes).real


def _reflect(grid: TorusGrid, a: np.ndarray, axis: int) -> np.ndarray:
    """a(x) -> a(-x) along one spatial axis (index j -> -j mod n)."""
    ax = axis - grid.d
    return np.roll(np.flip(a, axis=ax), 1, axis=ax)


def hermitian_part(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Average ``c_m`` with ``conj(c_{-m})`` so the field is real."""
    rev = c
    for ax in grid.axes:
        rev = np.roll(np.flip(rev, axis=ax), 1, axis=ax)
    return 0.5 * (c + np.conj(rev))


@dataclass(eq=False)
class SpectralField:
    """Real scalar field held as collocation samples and/or Fourier modes.

    Construct with either ``samples`` (real, grid shape) or ``modes``
    (complex, grid shape, ``fftn / n**d`` normalisation). The other
    representation is computed on first access and cached.
    """

    grid: TorusGrid
    _samples: np.ndarray | None = field(default=None, repr=False)
    _modes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self._samples is None and self._modes is None:
            raise ValueError("a field needs samples or modes")
        for a in (self._samples, self._modes):
            if a is not None and a.shape != self.grid.shape:
                raise GridMismatch(f"array shape {a.shape} does not match grid {self.grid.shape}")

    @classmethod
    def from_samples(cls, grid: TorusGrid, samples) -> "SpectralField":
        return cls(grid, _samples=np.asarray(samples, dtype=float))

    @classmethod
    def from_modes(cls, grid: TorusGrid, modes) -> "SpectralField":
        return cls(grid, _modes=np.asarray(modes, dtype=complex))

    @classmethod
    def from_function(cls, grid: TorusGrid, fn) -> "SpectralField":
        return cls.from_samples(grid, np.broadcast_to(fn(*grid.coords), grid.shape).copy())

    @property
    def current(self) -> str:
        """Which representation is populated: 'samples', 'modes' or 'both'."""
        if self._samples is not None and self._modes is not None:
            return "both"
        return "samples" if self._samples is not None else "modes"

    @property
    def samples(self) -> np.ndarray:
        if self._samples is None:
            self._samples = _ifft(self.grid, self._modes)
        return self._samples

    @property
    def modes(self) -> np.ndarray:
        if self._modes is None:
            self._modes = hermitian_part(self.grid, _fft(self.grid, self._samples))
        return self._modes

    @property
    def mean(self) -> float:
        return float(self.modes.flat[0].real)

    def integral(self) -> float:
        return float(self.grid.integrate(self.samples))

    def _check(self, other):
        if other.grid != self.grid:
            raise GridMismatch(f"{self.grid} vs {other.grid}")

    def __add__(self, other):
        if isinstance(other, SpectralField):
            self._check(other)
            return SpectralField.from_samples(self.grid, self.samples + other.samples)
        return SpectralField.from_samples(self.grid, self.samples + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, SpectralField):
            self._check(other)
            return SpectralField.from_samples(self.grid, self.samples - other.samples)
        return SpectralField.from_samples(self.grid, self.samples - other)

    def __mul__(self, c):
        if isinstance(c, SpectralField):
            self._check(c)
            return SpectralField.from_samples(self.grid, self.samples * c.samples)
        return SpectralField.from_samples(self.grid, self.samples * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


@dataclass(eq=False)
class SpectralVectorField:
    """d-component real vector field; ``components`` is a tuple of SpectralField."""

    components: tuple

    def __post_init__(self):
        self.components = tuple(self.components)
        grids = {c.grid for c in self.components}
        if len(grids) != 1:
            raise GridMismatch("components live on different grids")
        if len(self.components) != self.grid.d:
            raise ValueError(f"expected {self.grid.d} components, got {len(self.components)}")

    @property
    def grid(self) -> TorusGrid:
        return self.components[0].grid

    @classmethod
    def from_samples(cls, grid: TorusGrid, samples) -> "SpectralVectorField":
        samples = np.asarray(samples, dtype=float)
        return cls(tuple(SpectralField.from_samples(grid, s) for s in samples))

    @classmethod
    def from_modes(cls, grid: TorusGrid, modes) -> "SpectralVectorField":
        return cls(tuple(SpectralField.from_modes(grid, c) for c in modes))

    @classmethod
    def zeros(cls, grid: TorusGrid) -> "SpectralVectorField":
        return cls.from_samples(grid, np.zeros((grid.d,) + grid.shape))

    @property
    def samples(self) -> np.ndarray:
        return np.stack([c.samples for c in self.components])

    @property
    def modes(self) -> np.ndarray:
        return np.stack([c.modes for c in self.components])

    def __getitem__(self, i) -> SpectralField:
        return self.components[i]

    def __len__(self):
        return len(self.components)

    def __mul__(self, c):
        if isinstance(c, SpectralField):
            return SpectralVectorField.from_samples(self.grid, self.samples * c.samples)
        return SpectralVectorField.from_samples(self.grid, self.samples * c)

    __rmul__ = __mul__

    def __add__(self, other):
        return SpectralVectorField.from_samples(self.grid, self.samples + other.samples)

    def __sub__(self, other):
        return SpectralVectorField.from_samples(self.grid, self.samples - other.samples)


def to_modes(f):
    """Populate the mode representation (Hermitian symmetry enforced)."""
    if isinstance(f, SpectralVectorField):
        return SpectralVectorField(tuple(to_modes(c) for c in f.components))
    return SpectralField(f.grid, _samples=f._samples, _modes=f.modes)


def to_samples(f):
    """Populate the sample representation."""
    if isinstance(f, SpectralVectorField):
        return SpectralVectorField(tuple(to_samples(c) for c in f.components))
    return SpectralField(f.grid, _samples=f.samples, _modes=f._modes)


def project_N(f, N: int | None = None):
    """L2-orthogonal projection onto trigonometric polynomials with ``|m|_inf <= N``."""
    if isinstance(f, SpectralVectorField):
        return SpectralVectorField(tuple(project_N(c, N) for c in f.components))
    grid = f.grid
    mask = grid.galerkin_mask if N is None else grid.mask(N)
    return SpectralField.from_modes(grid, f.modes * mask)


def inv_laplacian(f: SpectralField) -> SpectralField:
    """Solve ``Delta g = f - mean(f)`` with ``mean(g) = 0``."""
    return SpectralField.from_modes(f.grid, -f.modes * f.grid.inv_k2)


def gradient(f: SpectralField) -> SpectralVectorField:
    g = f.grid
    return SpectralVectorField.from_modes(g, g.deriv * f.modes)


def divergence(v: SpectralVectorField) -> SpectralField:
    g = v.grid
    return SpectralField.from_modes(g, np.sum(g.deriv * v.modes, axis=0))


def laplacian(f: SpectralField) -> SpectralField:
    return SpectralField.from_modes(f.grid, -f.grid.k2 * f.modes)


def jacobian(v: SpectralVectorField) -> np.ndarray:
    """Sample array ``J[i, j] = d_j v_i`` of shape ``(d, d, n, ..., n)``."""
    g = v.grid
    vm = v.modes
    return np.stack([_ifft(g, g.deriv * vm[i]) for i in range(g.d)])


def riesz_grad(f: SpectralField) -> SpectralVectorField:
    """grad Delta^{-1} f."""
    g = f.grid
    return SpectralVectorField.from_modes(g, -g.deriv * g.inv_k2 * f.modes)


def riesz_grad_div(v: SpectralVectorField) -> SpectralVectorField:
    """grad Delta^{-1} div v."""
    g = v.grid
    dv = np.sum(g.deriv * v.modes, axis=0)
    return SpectralVectorField.from_modes(g, -g.deriv * g.inv_k2 * dv)


def riesz_double(f: SpectralField) -> np.ndarray:
    """Matrix field ``R[i, j] = d_i d_j Delta^{-1} f`` as samples, shape ``(d, d, *grid)``.

    The multiplier is ``k_i k_j / |k|^2``; its trace is 1 off the zero mode.
    """
    g = f.grid
    out = np.empty((g.d, g.d) + g.shape)
    for i in range(g.d):
        for j in range(i, g.d):
            out[i, j] = _ifft(g, -g.second_deriv(i, j) * g.inv_k2 * f.modes)
            out[j, i] = out[i, j]
    return out


def _pad(grid: TorusGrid, c: np.ndarray, M: int) -> np.ndarray:
    """Embed modes of an n-grid into an M-grid (M > n), splitting Nyquist modes."""
    n = grid.n
    h = n // 2
    out = c
    for ax in grid.axes:
        lo = np.take(out, np.arange(0, h), axis=ax)
        nyq = 0.5 * np.take(out, [h], axis=ax)
        hi = np.take(out, np.arange(h + 1, n), axis=ax)
        zshape = list(out.shape)
        zshape[ax] = M - n - 1
        zeros = np.zeros(zshape, dtype=complex)
        out = np.concatenate([lo, nyq, zeros, nyq, hi], axis=ax)
    return out


def _unpad(grid: TorusGrid, c: np.ndarray, M: int) -> np.ndarray:
    """Fold modes of an M-grid back to the n-grid, keeping ``|m|_inf <= n/2``."""
    n = grid.n
    h = n // 2
    out = c
    for ax in grid.axes:
        lo = np.take(out, np.arange(0, h), axis=ax)
        nyq = np.take(out, [h], axis=ax) + np.take(out, [M - h], axis=ax)
        hi = np.take(out, np.arange(M - h + 1, M), axis=ax)
        out = np.concatenate([lo, nyq, hi], axis=ax)
    return out


def dealias_product(f: SpectralField, g: SpectralField) -> SpectralField:
    """Product of two fields with aliasing removed on every retained mode.

    Both factors are zero-padded to a ``2n`` grid, multiplied pointwise and
    truncated back, which reproduces the exact mode convolution restricted to
    ``|m|_inf <= n/2`` (a stricter variant of the 3/2 padding rule).
    """
    if f.grid != g.grid:
        raise GridMismatch(f"{f.grid} vs {g.grid}")
    grid = f.grid
    M = 2 * grid.n
    fp = _pad(grid, f.modes, M)
    gp = _pad(grid, g.modes, M)
    ax = grid.axes
    scale = M**grid.d
    prod = sfft.ifftn(fp * scale, axes=ax).real * sfft.ifftn(gp * scale, axes=ax).real
    pm = sfft.fftn(prod, axes=ax) / scale
    return SpectralField.from_modes(grid, hermitian_part(grid, _unpad(grid, pm, M)))


def _reflections(d: int):
    return [s for s in product((False, True), repeat=d)]


def symmetry_project(rho: SpectralField, u: SpectralVectorField):
    """Average over the reflection group ``x_j -> -x_j``.

    The class: rho even in every coordinate, ``u_i`` odd in ``x_i`` and even in
    the other coordinates.
    """
    grid = rho.grid
    r = rho.samples
    v = u.samples
    r_acc = np.zeros_like(r)
    v_acc = np.zeros_like(v)
    group = _reflections(grid.d)
    for flips in group:
        rr = r
        vv = v.copy()
        for ax, on in enumerate(flips):
            if on:
                rr = _reflect(grid, rr, ax)
                vv = _reflect(grid, vv, ax)
                vv[ax] = -vv[ax]
        r_acc += rr
        v_acc += vv
    k = len(group)
    return (
        SpectralField.from_samples(grid, r_acc / k),
        SpectralVectorField.from_samples(grid, v_acc / k),
    )


def symmetry_defect(rho: SpectralField, u: SpectralVectorField | None = None) -> float:
    """L2 distance of ``(rho, u)`` to the symmetry class."""
    grid = rho.grid
    if u is None:
        u = SpectralVectorField.zeros(grid)
    pr, pu = symmetry_project(rho, u)
    dr = rho.samples - pr.samples
    du = u.samples - pu.samples
    return float(np.sqrt(grid.integrate(dr**2) + np.sum(grid.integrate(du**2))))


def vector_symmetry_defect(v: SpectralVectorField) -> float:
    grid = v.grid
    return symmetry_defect(SpectralField.from_samples(grid, np.zeros(grid.shape)), v)


def lp_norm(f, p: float = 2.0) -> float:
    """L^p norm by trapezoid quadrature; vector fields use the pointwise Euclidean norm."""
    if p < 1:
        raise ValueError("p must be >= 1")
    grid = f.grid
    if isinstance(f, SpectralVectorField):
        a = np.sqrt(np.sum(f.samples**2, axis=0))
    else:
        a = np.abs(f.samples)
    if np.isinf(p):
        return float(a.max())
    return float(grid.integrate(a**p) ** (1.0 / p))


def sobolev12_sq(u) -> float:
    """``||u||_{L2}^2 + ||grad u||_{L2}^2`` with a spectral gradient (Parseval)."""
    grid = u.grid
    c = u.modes if isinstance(u, SpectralVectorField) else u.modes[None]
    grad2 = np.sum(np.abs(grid.deriv) ** 2, axis=0)
    return float(grid.volume * np.sum((1.0 + grad2) * np.abs(c) ** 2))


def sobolev12_norm(u) -> float:
    return float(np.sqrt(sobolev12_sq(u)))


def h_n_norm(u: SpectralVectorField, N: int | None = None) -> float:
    """L2 norm of the Galerkin projection of ``u``."""
    return lp_norm(project_N(u, N), 2.0)


def random_band_limited(grid: TorusGrid, bandwidth: int, rng, components: int | None = None):
    """Random real field with modes ``|m|_inf <= bandwidth``."""
    size = (grid.n,) * grid.d
    mask = grid.mask(bandwidth)

    def one():
        c = (rng.standard_normal(size) + 1j * rng.standard_normal(size)) * mask
        return SpectralField.from_modes(grid, hermitian_part(grid, c))

    if components is None:
        return one()
    return SpectralVectorField(tuple(one() for _ in range(components)))
