"""Periodic-grid fields, exact spectral shifts, and Fourier-multiplier semigroups.

Conventions used throughout the package:

* The domain is [0, L) sampled at x_j = j*L/M (uniform, periodic).
* DFT coefficients follow numpy: c_k = sum_j f_j exp(-2*pi*i*j*k/M), in
  standard (fftfreq) ordering.
* The discrete inner product is the rectangle rule, exact on a uniform
  periodic grid:  <f, g> = (L/M) * sum_{components, j} f_j g_j.
  Parseval then reads ||f||^2 = (L/M^2) * sum_k |c_k|^2.
* Wavenumbers are q_k = 2*pi*k/L for signed integer frequency k, so for the
  default ring L = 2*pi the q_k are the integers.
* shift(f, h) translates the pattern by +h: shift(f, h)(x) = f(x - h),
  realized as multiplication of c_k by exp(-i*q_k*h). This is exact for
  band-limited fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class GridMismatchError(ValueError):
    """Two fields that must share a grid (and component count) do not."""


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with m points on a domain of length `length`."""

    m: int
    length: float = 2.0 * np.pi

    def __post_init__(self):
        if self.m < 16 or self.m % 2 != 0:
            raise ValueError(f"grid size must be even and >= 16, got {self.m}")
        if not self.length > 0:
            raise ValueError(f"domain length must be positive, got {self.length}")

    @property
    def x(self):
        return np.arange(self.m) * (self.length / self.m)

    @property
    def dx(self):
        return self.length / self.m

    @property
    def wavenumbers(self):
        """Signed wavenumbers q_k in fftfreq ordering."""
        return np.fft.fftfreq(self.m, d=1.0 / self.m) * (2.0 * np.pi / self.length)

    @property
    def rfft_wavenumbers(self):
        """Wavenumbers 0..m/2 matching numpy's rfft layout."""
        return np.arange(self.m // 2 + 1) * (2.0 * np.pi / self.length)

    @property
    def dealias_limit(self):
        """Largest integer frequency kept by the 2/3-rule."""
        return self.m // 3

    def dealias_mask_rfft(self):
        k = np.arange(self.m // 2 + 1)
        return k <= self.dealias_limit


class Field:
    """Real n-component function sampled on a periodic grid.

    Values are stored as an (n, m) float array and frozen after construction;
    all operations return new Fields.
    """

    __slots__ = ("grid", "values", "n")

    def __init__(self, grid: Grid, values):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.ndim != 2 or values.shape[1] != grid.m:
            raise ValueError(f"values must have shape (n, {grid.m}), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values = values.copy()
        values.flags.writeable = False
        self.grid = grid
        self.values = values
        self.n = values.shape[0]

    def __setattr__(self, name, value):
        if hasattr(self, "n"):  # freeze after __init__ completes
            raise AttributeError("Field is immutable")
        super().__setattr__(name, value)

    def __reduce__(self):
        return (Field, (self.grid, np.asarray(self.values)))

    def component(self, i):
        return self.values[i]

    def __add__(self, other):
        _check_match(self, other)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_match(self, other)
        return Field(self.grid, self.values - other.values)

    def __mul__(self, scalar):
        return Field(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)

    def __repr__(self):
        return f"Field(n={self.n}, m={self.grid.m}, L={self.grid.length:.6g})"


class SpectralField:
    """DFT coefficients of a Field: (n, m) complex array, fftfreq ordering."""

    __slots__ = ("grid", "coeffs", "n")

    def __init__(self, grid: Grid, coeffs):
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=complex))
        if coeffs.shape[1] != grid.m:
            raise ValueError(f"coeffs must have shape (n, {grid.m}), got {coeffs.shape}")
        self.grid = grid
        self.coeffs = coeffs
        self.n = coeffs.shape[0]

    def hermitian_defect(self):
        """Max |c_{-k} - conj(c_k)|; zero for the transform of a real field."""
        flipped = np.conj(self.coeffs[:, (-np.arange(self.grid.m)) % self.grid.m])
        return float(np.max(np.abs(self.coeffs - flipped)))

    def energy(self):
        """Spectral energy matching ||f||^2 under the package convention."""
        g = self.grid
        return float(np.sum(np.abs(self.coeffs) ** 2)) * g.length / g.m**2


def _check_match(f: Field, g: Field):
    if f.grid != g.grid or f.n != g.n:
        raise GridMismatchError(
            f"fields do not match: ({f.n},{f.grid.m},{f.grid.length}) vs "
            f"({g.n},{g.grid.m},{g.grid.length})"
        )


def to_spectral(f: Field) -> SpectralField:
    return SpectralField(f.grid, np.fft.fft(f.values, axis=-1))


def from_spectral(sf: SpectralField) -> Field:
    return Field(sf.grid, np.real(np.fft.ifft(sf.coeffs, axis=-1)))


def inner(f: Field, g: Field) -> float:
    """Rectangle-rule L2 inner product summed over components."""
    _check_match(f, g)
    return float(np.sum(f.values * g.values)) * f.grid.dx


def norm(f: Field) -> float:
    return float(np.sqrt(max(np.sum(f.values**2) * f.grid.dx, 0.0)))


def deriv(f: Field, order: int = 1) -> Field:
    """Spectral x-derivative. The Nyquist mode is zeroed for odd orders."""
    c = np.fft.rfft(f.values, axis=-1)
    q = f.grid.rfft_wavenumbers
    mult = (1j * q) ** order
    if order % 2 == 1:
        mult = mult.copy()
        mult[-1] = 0.0
    return Field(f.grid, np.fft.irfft(c * mult, n=f.grid.m, axis=-1))


def norm_e(f: Field) -> float:
    """Discrete H^1 norm: L2 of the values plus L2 of the spectral derivative.

    This realizes the stronger norm used for tube distances and exit times.
    """
    df = deriv(f)
    return float(np.sqrt(norm(f) ** 2 + norm(df) ** 2))


def shift(f: Field, h: float) -> Field:
    """Translate the pattern by +h (exact for band-limited fields)."""
    if not np.isfinite(h):
        raise ValueError("shift distance must be finite")
    c = np.fft.rfft(f.values, axis=-1)
    return Field(f.grid, np.fft.irfft(c * shift_multiplier(f.grid, h), n=f.grid.m, axis=-1))


def shift_multiplier(grid: Grid, h: float):
    """rfft-layout multiplier exp(-i q_k h) implementing shift(., h)."""
    return np.exp(-1j * grid.rfft_wavenumbers * h)


def dealias(f: Field) -> Field:
    """Zero all modes above the 2/3-rule limit."""
    c = np.fft.rfft(f.values, axis=-1)
    c[:, ~f.grid.dealias_mask_rfft()] = 0.0
    return Field(f.grid, np.fft.irfft(c, n=f.grid.m, axis=-1))


@dataclass(frozen=True, eq=False)
class LinearOp:
    """Diagonal-in-Fourier linear operator with an optional co-moving speed.

    `symbols` holds the real multiplier a_k per component in rfft layout,
    shape (n, m//2 + 1). The effective symbol is a_k + i*q_k*c, so a positive
    speed c turns the generated semigroup into the co-moving frame transport.
    """

    grid: Grid
    symbols: np.ndarray
    speed: float = 0.0

    def __post_init__(self):
        sym = np.atleast_2d(np.asarray(self.symbols, dtype=float))
        if sym.shape[1] != self.grid.m // 2 + 1:
            raise ValueError(f"symbols must have shape (n, {self.grid.m // 2 + 1})")
        if not np.all(np.isfinite(sym)):
            raise ValueError("symbols must be finite")
        object.__setattr__(self, "symbols", sym)

    @property
    def n(self):
        return self.symbols.shape[0]

    @property
    def growth_bound(self):
        """sup_k Re a_k; the semigroup obeys ||Lambda_t|| <= exp(t * bound)."""
        return float(np.max(self.symbols))

    def full_symbol(self):
        """Complex symbol a_k + i q_k c in rfft layout."""
        return self.symbols + 1j * self.grid.rfft_wavenumbers * self.speed

    @classmethod
    def constant(cls, grid: Grid, value: float, n: int = 1, speed: float = 0.0):
        """A = value * identity (e.g. the -I of a ring rate model)."""
        sym = np.full((n, grid.m // 2 + 1), float(value))
        return cls(grid, sym, speed)

    @classmethod
    def diffusion(cls, grid: Grid, coefficients, speed: float = 0.0):
        """A = D * Laplacian per component, plus an optional advection c."""
        coefficients = np.atleast_1d(np.asarray(coefficients, dtype=float))
        q = grid.rfft_wavenumbers
        sym = -coefficients[:, None] * q[None, :] ** 2
        return cls(grid, sym, speed)


def semigroup_factor(op: LinearOp, t: float):
    """exp(t * (a_k + i q_k c)) in rfft layout, shape (n, m//2+1)."""
    if t < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {t}")
    return np.exp(t * op.full_symbol())


def apply_semigroup(op: LinearOp, t: float, f: Field) -> Field:
    """Apply Lambda_t = exp(tA) by Fourier multiplication."""
    if f.grid != op.grid or f.n != op.n:
        raise GridMismatchError("operator and field live on different grids")
    c = np.fft.rfft(f.values, axis=-1)
    return Field(f.grid, np.fft.irfft(c * semigroup_factor(op, t), n=f.grid.m, axis=-1))


def apply_op(op: LinearOp, f: Field) -> Field:
    """Apply A itself (Fourier multiplication by the full symbol)."""
    if f.grid != op.grid or f.n != op.n:
        raise GridMismatchError("operator and field live on different grids")
    c = np.fft.rfft(f.values, axis=-1)
    return Field(f.grid, np.fft.irfft(c * op.full_symbol(), n=f.grid.m, axis=-1))


def phi1(z):
    """(exp(z) - 1)/z, evaluated by series near 0 to avoid cancellation."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-4
    zs = z[small]
    out[small] = 1.0 + zs / 2.0 + zs**2 / 6.0 + zs**3 / 24.0
    zb = z[~small]
    out[~small] = np.expm1(zb) / zb
    return out


def save_field_csv(f: Field, path, meta_path=None):
    """Write `x,component_0,...` rows plus a sidecar JSON of grid metadata."""
    header = "x," + ",".join(f"component_{i}" for i in range(f.n))
    data = np.column_stack([f.grid.x] + [f.values[i] for i in range(f.n)])
    np.savetxt(path, data, delimiter=",", header=header, comments="")
    meta = {"m": f.grid.m, "length": f.grid.length, "n": f.n}
    if meta_path is None:
        meta_path = str(path) + ".json"
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_field_csv(path, meta_path=None) -> Field:
    if meta_path is None:
        meta_path = str(path) + ".json"
    with open(meta_path) as fh:
        meta = json.load(fh)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    grid = Grid(int(meta["m"]), float(meta["length"]))
    return Field(grid, data[:, 1:].T)
