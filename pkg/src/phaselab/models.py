"""Concrete right-hand sides V(u) = A u + N(u) with analytic derivatives of N.

Two families are provided:

* ``neural-field-ring``: A = -decay * I and N(u) = w * f(u), a spectral
  convolution of a logistic firing rate against a low-mode cosine kernel
  w(x) = a1*cos(2*pi*x/L) + a2*cos(4*pi*x/L). The kernel is represented by
  its continuous Fourier coefficients, so the convolution is a plain
  Fourier multiplier.
* ``reaction-diffusion-comoving``: A = D*Laplacian + c*d/dx and N(u) a
  pointwise polynomial (e.g. the cubic u(1-u)(u-a)). Pointwise products are
  evaluated on a zero-padded grid and truncated with the 2/3 rule so that
  aliasing cannot leak into derivative checks.

The logistic firing rate keeps N three times differentiable, which the
derivative calculus downstream relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .spectral import Field, Grid, GridMismatchError, LinearOp, apply_op


@dataclass(frozen=True, eq=False)
class ModelSpec:
    kind: str  # "neural-field-ring" | "reaction-diffusion-comoving"
    grid: Grid
    linear: LinearOp
    params: dict = field(default_factory=dict)
    kernel_rfft: np.ndarray | None = None  # continuous FT coefficients of w

    def __post_init__(self):
        if self.kind not in ("neural-field-ring", "reaction-diffusion-comoving"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "neural-field-ring":
            k = np.asarray(self.kernel_rfft)
            if k.shape != (self.grid.m // 2 + 1,):
                raise ValueError("kernel symbol must be in rfft layout")
            if np.iscomplexobj(k):
                raise ValueError("kernel symbol must be real (symmetric kernel)")


def neural_field_ring(grid: Grid, a1=1.0, a2=0.0, beta=20.0, threshold=0.3, decay=1.0):
    """Scalar ring model du/dt = -decay*u + w * f(u).

    The translation orbit of its bump solution is a circle of genuine fixed
    points, which is the flagship configuration for everything downstream.
    """
    if beta <= 0:
        raise ValueError("gain beta must be positive")
    kernel = np.zeros(grid.m // 2 + 1)
    # int_0^L cos(2 pi k x / L) cos(2 pi k' x / L) dx = (L/2) delta(k, k')
    kernel[1] = a1 * grid.length / 2.0
    if grid.m // 2 >= 2:
        kernel[2] = a2 * grid.length / 2.0
    linear = LinearOp.constant(grid, -float(decay), n=1)
    params = {"a1": float(a1), "a2": float(a2), "beta": float(beta),
              "threshold": float(threshold), "decay": float(decay)}
    return ModelSpec("neural-field-ring", grid, linear, params, kernel)


def nagumo_comoving(grid: Grid, a=0.5, diffusion=1.0, speed=None):
    """Bistable cubic u(1-u)(u-a) with A = D*Laplacian + c*d/dx.

    With speed=None the classical front speed (1-2a)*sqrt(D/2) is used, which
    is zero at the balanced point a = 1/2 where exact kink/antikink ring
    profiles exist.
    """
    if speed is None:
        speed = (1.0 - 2.0 * a) * np.sqrt(diffusion / 2.0)
    # u(1-u)(u-a) = -a*u + (1+a)*u^2 - u^3, ascending powers
    poly = np.array([0.0, -a, 1.0 + a, -1.0])
    linear = LinearOp.diffusion(grid, [diffusion], speed=float(speed))
    params = {"a": float(a), "diffusion": float(diffusion), "speed": float(speed),
              "poly": poly}
    return ModelSpec("reaction-diffusion-comoving", grid, linear, params)


# -- firing rate ------------------------------------------------------------

def firing_rate(m: ModelSpec, u, order=0):
    """Logistic f(u) and its first two derivatives, vectorized over arrays."""
    beta = m.params["beta"]
    s = expit(beta * (u - m.params["threshold"]))
    if order == 0:
        return s
    if order == 1:
        return beta * s * (1.0 - s)
    if order == 2:
        return beta * beta * s * (1.0 - s) * (1.0 - 2.0 * s)
    raise ValueError("order must be 0, 1 or 2")


def _poly_derivative(coeffs, order):
    c = np.asarray(coeffs, dtype=float)
    for _ in range(order):
        c = c[1:] * np.arange(1, len(c))
    return c


def _polyval(coeffs, u):
    out = np.zeros_like(u)
    for c in coeffs[::-1]:
        out = out * u + c
    return out


# -- dealiased pointwise evaluation ------------------------------------------

def _pad_values(values, m):
    """Trigonometric interpolation of (n, m) samples onto a 2m grid."""
    c = np.fft.rfft(values, axis=-1)
    c[..., -1] *= 0.5  # Nyquist split when padding
    return np.fft.irfft(c, n=2 * m, axis=-1) * 2.0


def _unpad_hat(values_fine, grid: Grid):
    """rfft coefficients on the m grid of 2m-grid samples, 2/3-truncated."""
    c = np.fft.rfft(values_fine, axis=-1)[..., : grid.m // 2 + 1] * 0.5
    c[..., ~grid.dealias_mask_rfft()] = 0.0
    return c


def _unpad_values(values_fine, grid: Grid):
    """Project 2m-grid samples back to the m grid, 2/3-rule truncated."""
    return np.fft.irfft(_unpad_hat(values_fine, grid), n=grid.m, axis=-1)


def _check_field(m: ModelSpec, u: Field):
    if u.grid != m.grid:
        raise GridMismatchError("field is not on the model grid")
    if u.n != 1:
        raise GridMismatchError("scalar models expect single-component fields")


def _convolve(m: ModelSpec, values):
    """Kernel convolution (w * g) via the continuous Fourier coefficients."""
    c = np.fft.rfft(values, axis=-1)
    return np.fft.irfft(c * m.kernel_rfft, n=m.grid.m, axis=-1)


# -- N and its derivatives ----------------------------------------------------

def eval_N(m: ModelSpec, u: Field) -> Field:
    _check_field(m, u)
    return Field(m.grid, eval_N_values(m, u.values))


def eval_N_values(m: ModelSpec, u_values):
    """Array-level N(u); `u_values` may carry leading batch dimensions."""
    if m.kind == "neural-field-ring":
        return _convolve(m, firing_rate(m, u_values))
    fine = _pad_values(u_values, m.grid.m)
    return _unpad_values(_polyval(m.params["poly"], fine), m.grid)


def eval_N_hat(m: ModelSpec, u_values):
    """rfft coefficients of N(u), avoiding a round trip for the integrators."""
    if m.kind == "neural-field-ring":
        return np.fft.rfft(firing_rate(m, u_values), axis=-1) * m.kernel_rfft
    fine = _pad_values(u_values, m.grid.m)
    return _unpad_hat(_polyval(m.params["poly"], fine), m.grid)


def eval_DN_hat(m: ModelSpec, u_values, y_values):
    """rfft coefficients of DN(u)[y]."""
    if m.kind == "neural-field-ring":
        return np.fft.rfft(firing_rate(m, u_values, 1) * y_values,
                           axis=-1) * m.kernel_rfft
    mg = m.grid.m
    fine = _polyval(_poly_derivative(m.params["poly"], 1), _pad_values(u_values, mg))
    return _unpad_hat(fine * _pad_values(y_values, mg), m.grid)


def eval_D2N_hat(m: ModelSpec, u_values, y_values, z_values):
    """rfft coefficients of D2N(u)[y, z]."""
    if m.kind == "neural-field-ring":
        prod = firing_rate(m, u_values, 2) * y_values * z_values
        return np.fft.rfft(prod, axis=-1) * m.kernel_rfft
    mg = m.grid.m
    fine = _polyval(_poly_derivative(m.params["poly"], 2), _pad_values(u_values, mg))
    prod = fine * _pad_values(y_values, mg) * _pad_values(z_values, mg)
    return _unpad_hat(prod, m.grid)


def eval_DN(m: ModelSpec, u: Field, y: Field) -> Field:
    _check_field(m, u)
    _check_field(m, y)
    return Field(m.grid, eval_DN_values(m, u.values, y.values))


def eval_DN_values(m: ModelSpec, u_values, y_values):
    if m.kind == "neural-field-ring":
        return _convolve(m, firing_rate(m, u_values, 1) * y_values)
    mg = m.grid.m
    fine = _polyval(_poly_derivative(m.params["poly"], 1), _pad_values(u_values, mg))
    return _unpad_values(fine * _pad_values(y_values, mg), m.grid)


def eval_DN_adjoint(m: ModelSpec, u: Field, z: Field) -> Field:
    """Adjoint of y -> DN(u)[y] in the discrete L2 inner product.

    For the even convolution kernel this is f'(u) * (w * z); for the pointwise
    polynomial the multiplication is self-adjoint up to the dealias projector.
    """
    _check_field(m, u)
    _check_field(m, z)
    if m.kind == "neural-field-ring":
        return Field(m.grid, firing_rate(m, u.values, 1) * _convolve(m, z.values))
    mg = m.grid.m
    fine = _polyval(_poly_derivative(m.params["poly"], 1), _pad_values(u.values, mg))
    zp = _pad_values(_unpad_values(_pad_values(z.values, mg), m.grid), mg)
    return Field(m.grid, _unpad_values(fine * zp, m.grid))


def eval_D2N(m: ModelSpec, u: Field, y: Field, z: Field) -> Field:
    _check_field(m, u)
    _check_field(m, y)
    _check_field(m, z)
    return Field(m.grid, eval_D2N_values(m, u.values, y.values, z.values))


def eval_D2N_values(m: ModelSpec, u_values, y_values, z_values):
    if m.kind == "neural-field-ring":
        return _convolve(m, firing_rate(m, u_values, 2) * y_values * z_values)
    mg = m.grid.m
    fine = _polyval(_poly_derivative(m.params["poly"], 2), _pad_values(u_values, mg))
    prod = fine * _pad_values(y_values, mg) * _pad_values(z_values, mg)
    return _unpad_values(prod, m.grid)


def eval_D2N_weight(m: ModelSpec, u: Field, z: Field, y: Field) -> Field:
    """Field q with <z, D2N(u)[v, y]> = <q, v> for every direction v.

    Used to turn the time quadratures of the phase calculus into plain inner
    products against stored trajectories.
    """
    _check_field(m, u)
    if m.kind == "neural-field-ring":
        q = firing_rate(m, u.values, 2) * y.values * _convolve(m, z.values)
        return Field(m.grid, q)
    mg = m.grid.m
    fine = _polyval(_poly_derivative(m.params["poly"], 2), _pad_values(u.values, mg))
    zp = _unpad_values(_pad_values(z.values, mg), m.grid)
    q = _unpad_values(fine * _pad_values(y.values, mg) * _pad_values(zp, mg), m.grid)
    return Field(m.grid, q)


def eval_V(m: ModelSpec, u: Field) -> Field:
    """Full right-hand side A u + N(u)."""
    _check_field(m, u)
    return apply_op(m.linear, u) + eval_N(m, u)


def kernel_l1_norm(m: ModelSpec) -> float:
    """||w||_1 on the grid (neural-field models only)."""
    if m.kind != "neural-field-ring":
        raise ValueError("kernel norm only defined for neural-field models")
    w = np.fft.irfft(np.asarray(m.kernel_rfft) * (m.grid.m / m.grid.length),
                     n=m.grid.m)
    return float(np.sum(np.abs(w)) * m.grid.dx)


def dump_kernel_csv(m: ModelSpec, path):
    """Write the kernel Fourier coefficients to CSV."""
    if m.kind != "neural-field-ring":
        raise ValueError("kernel dump only defined for neural-field models")
    k = np.arange(m.grid.m // 2 + 1)
    data = np.column_stack([k, np.asarray(m.kernel_rfft)])
    np.savetxt(path, data, delimiter=",", header="k,coefficient", comments="")
