"""Deterministic evolution, its linearization, and the second variation.

The integrators are exponential (Duhamel) schemes: the linear part is applied
exactly through its Fourier symbol and the nonlinearity enters through
phi1(z) = (exp(z)-1)/z. The linearized and second-variation integrators are
the exact first and second derivatives of the discrete step, so finite
difference consistency checks are limited only by the difference step, not by
the scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .spectral import Field, inner, norm, phi1

SCHEMES = ("exponential-euler", "etd-rk2")


class DivergenceError(RuntimeError):
    """State norm exceeded the divergence guard."""


class UnstableManifoldError(RuntimeError):
    """Measured off-tangent dynamics does not decay."""


@dataclass(frozen=True)
class FlowConfig:
    dt: float = 1e-2
    scheme: str = "exponential-euler"
    t_max: float = 200.0
    convergence_tol: float = 1e-8
    divergence_guard: float = 1e6

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.convergence_tol <= 0:
            raise ValueError("convergence tolerance must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


class StepFactors:
    """Precomputed Fourier-space factors for one step size."""

    def __init__(self, m: models.ModelSpec, dt: float):
        z = dt * m.linear.full_symbol()  # (n, Mr)
        self.dt = dt
        self.exp = np.exp(z)
        self.phi1dt = phi1(z) * dt
        self.phi2dt = _phi2(z) * dt


def _phi2(z):
    """(exp(z) - 1 - z)/z^2 with a series fallback near zero."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-4
    zs = z[small]
    out[small] = 0.5 + zs / 6.0 + zs**2 / 24.0 + zs**3 / 120.0
    zb = z[~small]
    out[~small] = (np.expm1(zb) - zb) / zb**2
    return out


def _rfft(values):
    return np.fft.rfft(values, axis=-1)


def _irfft(hat, mgrid):
    return np.fft.irfft(hat, n=mgrid, axis=-1)


def _guard(values, limit):
    if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > limit:
        raise DivergenceError("state exceeded the divergence guard")


def step_values(m, fac: StepFactors, x, scheme="exponential-euler"):
    """Advance physical-space values (..., n, M) by one step."""
    xh = _rfft(x)
    nh = models.eval_N_hat(m, x)
    if scheme == "exponential-euler":
        return _irfft(fac.exp * xh + fac.phi1dt * nh, m.grid.m)
    a = _irfft(fac.exp * xh + fac.phi1dt * nh, m.grid.m)
    nh2 = models.eval_N_hat(m, a)
    return a + _irfft(fac.phi2dt * (nh2 - nh), m.grid.m)


def _step_schedule(t, dt):
    """Whole steps plus one remainder step landing exactly on t."""
    n_full = int(np.floor(t / dt + 1e-9))
    rem = t - n_full * dt
    if rem < 1e-12 * max(1.0, t):
        rem = 0.0
    return n_full, rem


def evolve(m: models.ModelSpec, x0: Field, t: float, cfg: FlowConfig,
           dump=None, dump_stride=1) -> Field:
    """Approximate the time-t flow map applied to x0.

    `dump`, if given, is a file handle receiving CSV rows `t,x_0,...,x_{M-1}`
    every `dump_stride` steps (first component only).
    """
    if t < 0:
        raise ValueError("evolution time must be nonnegative")
    x = x0.values.copy()
    n_full, rem = _step_schedule(t, cfg.dt)
    fac = StepFactors(m, cfg.dt)
    if dump is not None:
        _dump_row(dump, 0.0, x)
    for i in range(n_full):
        x = step_values(m, fac, x, cfg.scheme)
        _guard(x, cfg.divergence_guard)
        if dump is not None and (i + 1) % dump_stride == 0:
            _dump_row(dump, (i + 1) * cfg.dt, x)
    if rem > 0.0:
        x = step_values(m, StepFactors(m, rem), x, cfg.scheme)
        _guard(x, cfg.divergence_guard)
        if dump is not None:
            _dump_row(dump, t, x)
    return Field(m.grid, x)


def _dump_row(handle, t, values):
    row = ",".join(f"{v!r}" for v in values[0])
    handle.write(f"{t!r},{row}\n")


def step_linearized_values(m, fac, x, y, scheme="exponential-euler"):
    """One step of the pair (x, y) where y solves the first variation."""
    xh, yh = _rfft(x), _rfft(y)
    nh = models.eval_N_hat(m, x)
    dnh = models.eval_DN_hat(m, x, y)
    if scheme == "exponential-euler":
        x1 = _irfft(fac.exp * xh + fac.phi1dt * nh, m.grid.m)
        y1 = _irfft(fac.exp * yh + fac.phi1dt * dnh, m.grid.m)
        return x1, y1
    a = _irfft(fac.exp * xh + fac.phi1dt * nh, m.grid.m)
    da = _irfft(fac.exp * yh + fac.phi1dt * dnh, m.grid.m)
    nh2 = models.eval_N_hat(m, a)
    dnh2 = models.eval_DN_hat(m, a, da)
    x1 = a + _irfft(fac.phi2dt * (nh2 - nh), m.grid.m)
    y1 = da + _irfft(fac.phi2dt * (dnh2 - dnh), m.grid.m)
    return x1, y1


def evolve_linearized(m: models.ModelSpec, x0: Field, y0: Field, t: float,
                      cfg: FlowConfig) -> Field:
    """First variation of the flow: integrates y' = A y + DN(phi_s(x0))[y].

    The base trajectory is recomputed in lockstep; nothing is stored.
    """
    if t < 0:
        raise ValueError("evolution time must be nonnegative")
    x, y = x0.values.copy(), y0.values.copy()
    n_full, rem = _step_schedule(t, cfg.dt)
    fac = StepFactors(m, cfg.dt)
    for _ in range(n_full):
        x, y = step_linearized_values(m, fac, x, y, cfg.scheme)
        _guard(x, cfg.divergence_guard)
        _guard(y, cfg.divergence_guard)
    if rem > 0.0:
        x, y = step_linearized_values(m, StepFactors(m, rem), x, y, cfg.scheme)
    return Field(m.grid, y)


def step_second_variation_values(m, fac, x, y, z, a, scheme="exponential-euler"):
    """One step of (x, y, z, a) with a the second variation along (y, z)."""
    xh, yh, zh, ah = _rfft(x), _rfft(y), _rfft(z), _rfft(a)
    nh = models.eval_N_hat(m, x)
    dny = models.eval_DN_hat(m, x, y)
    dnz = models.eval_DN_hat(m, x, z)
    dna = models.eval_DN_hat(m, x, a)
    d2n = models.eval_D2N_hat(m, x, y, z)
    if scheme == "exponential-euler":
        x1 = _irfft(fac.exp * xh + fac.phi1dt * nh, m.grid.m)
        y1 = _irfft(fac.exp * yh + fac.phi1dt * dny, m.grid.m)
        z1 = _irfft(fac.exp * zh + fac.phi1dt * dnz, m.grid.m)
        a1 = _irfft(fac.exp * ah + fac.phi1dt * (dna + d2n), m.grid.m)
        return x1, y1, z1, a1
    # ETD-RK2: differentiate the two-stage step twice.
    u1 = _irfft(fac.exp * xh + fac.phi1dt * nh, m.grid.m)
    du1y = _irfft(fac.exp * yh + fac.phi1dt * dny, m.grid.m)
    du1z = _irfft(fac.exp * zh + fac.phi1dt * dnz, m.grid.m)
    d2u1 = _irfft(fac.exp * ah + fac.phi1dt * (dna + d2n), m.grid.m)
    nh2 = models.eval_N_hat(m, u1)
    x1 = u1 + _irfft(fac.phi2dt * (nh2 - nh), m.grid.m)
    dny2 = models.eval_DN_hat(m, u1, du1y)
    dnz2 = models.eval_DN_hat(m, u1, du1z)
    y1 = du1y + _irfft(fac.phi2dt * (dny2 - dny), m.grid.m)
    z1 = du1z + _irfft(fac.phi2dt * (dnz2 - dnz), m.grid.m)
    d2n2 = (models.eval_D2N_hat(m, u1, du1y, du1z)
            + models.eval_DN_hat(m, u1, d2u1))
    a1 = d2u1 + _irfft(fac.phi2dt * (d2n2 - d2n - dna), m.grid.m)
    return x1, y1, z1, a1


def evolve_second_variation(m: models.ModelSpec, x0: Field, y0: Field,
                            z0: Field, t: float, cfg: FlowConfig) -> Field:
    """Second variation D^2 phi_t(x0)[y0, z0]; starts from zero and is
    symmetric in (y0, z0) by construction."""
    if t < 0:
        raise ValueError("evolution time must be nonnegative")
    x, y, z = x0.values.copy(), y0.values.copy(), z0.values.copy()
    a = np.zeros_like(x)
    n_full, rem = _step_schedule(t, cfg.dt)
    fac = StepFactors(m, cfg.dt)
    for _ in range(n_full):
        x, y, z, a = step_second_variation_values(m, fac, x, y, z, a, cfg.scheme)
        _guard(x, cfg.divergence_guard)
        _guard(a, cfg.divergence_guard)
    if rem > 0.0:
        x, y, z, a = step_second_variation_values(
            m, StepFactors(m, rem), x, y, z, a, cfg.scheme)
    return Field(m.grid, a)


def measure_decay_rate(m: models.ModelSpec, gamma0: Field, psi0: Field,
                       psi_star0: Field, cfg: FlowConfig, t_total=16.0,
                       seed=0, n_samples=160):
    """Fit the off-tangent decay rate of the linearization about gamma0.

    A random perturbation is projected off the tangent direction, evolved
    with the linearized flow, and log ||y(t)|| is fitted on [T/2, T] by least
    squares. Returns (b_hat, r_squared).
    """
    rng = np.random.default_rng(seed)
    y = Field(m.grid, rng.standard_normal(gamma0.values.shape))
    y = y - inner(psi_star0, y) * psi0
    ny = norm(y)
    if ny < 1e-12:
        raise ValueError("perturbation vanishes after tangent removal")
    y = (1.0 / ny) * y

    sample_dt = t_total / n_samples
    times, lognorms = [], []
    x, yv = gamma0.values.copy(), y.values.copy()
    n_sub = max(1, int(round(sample_dt / cfg.dt)))
    fac = StepFactors(m, sample_dt / n_sub)
    for i in range(n_samples):
        for _ in range(n_sub):
            x, yv = step_linearized_values(m, fac, x, yv, cfg.scheme)
        t = (i + 1) * sample_dt
        if t >= t_total / 2.0:
            times.append(t)
            lognorms.append(np.log(norm(Field(m.grid, yv)) + 1e-300))
    times = np.asarray(times)
    lognorms = np.asarray(lognorms)
    design = np.column_stack([times, np.ones_like(times)])
    coef, *_ = np.linalg.lstsq(design, lognorms, rcond=None)
    slope = coef[0]
    fitted = design @ coef
    ss_res = float(np.sum((lognorms - fitted) ** 2))
    ss_tot = float(np.sum((lognorms - lognorms.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    if slope >= 0:
        raise UnstableManifoldError(
            f"off-tangent perturbation does not decay (slope {slope:.3g})")
    return float(-slope), float(r_squared)


def trajectory_arrays(m: models.ModelSpec, x0_values, dt: float, n_steps: int,
                      scheme="exponential-euler", guard=1e6):
    """Integrate and return stacked (x_s, N(x_s)) along the trajectory.

    Output arrays have shape (n_steps + 1,) + state_shape; entry i is at
    time i*dt. Used by the fixed-point phase solvers, which need the stored
    trajectory for their time quadratures.
    """
    fac = StepFactors(m, dt)
    xs = np.empty((n_steps + 1,) + x0_values.shape)
    ns = np.empty_like(xs)
    x = x0_values.copy()
    for i in range(n_steps):
        xs[i] = x
        nh = models.eval_N_hat(m, x)
        ns[i] = _irfft(nh, m.grid.m)
        if scheme == "exponential-euler":
            x = _irfft(fac.exp * _rfft(x) + fac.phi1dt * nh, m.grid.m)
        else:
            a = _irfft(fac.exp * _rfft(x) + fac.phi1dt * nh, m.grid.m)
            x = a + _irfft(fac.phi2dt * (models.eval_N_hat(m, a) - nh), m.grid.m)
        _guard(x, guard)
    xs[n_steps] = x
    ns[n_steps] = _irfft(models.eval_N_hat(m, x), m.grid.m)
    return xs, ns
