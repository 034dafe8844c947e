"""Reduced phase dynamics on the circle: drift, diffusion, invariant measure.

The reduced equation driven at noise amplitude sigma is

    d(phi) = sigma^2 * V(phi) dt + sigma * g(phi) dW,

where V(phi) = 1/2 sum_k D2pi(gamma_phi)[B e_k, B e_k] is the quadratic
(Ito) phase drift and g(phi)^2 = sum_k <psi*_phi, B e_k>^2 the projected
noise intensity; both are sigma-free. Its stationary density solves the
periodic Fokker-Planck problem with constant probability current, in closed
form via two quadratures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .flow import FlowConfig
from .isochron import d2pi_manifold_diagonal, default_t_infinity, wrap_phase
from .manifold import ManifoldFrame
from .spectral import inner
from .stochastic import NoiseBasis, NoiseModel, PathRecord, path_rng


class PositivityError(RuntimeError):
    """Diffusion coefficient fell below the positivity floor."""


@dataclass
class ReducedCoeffs:
    """Tabulated drift and diffusion on a phase grid plus the invariant law."""

    alpha_grid: np.ndarray
    v: np.ndarray            # drift values, radians per unit rescaled time
    g: np.ndarray            # diffusion values, radians per sqrt(time)
    pstar: np.ndarray        # stationary density, 1/radian
    mean_drift: float        # integral of v against pstar
    meta: dict

    def v_of(self):
        return _periodic_spline(self.alpha_grid, self.v)

    def g_of(self):
        return _periodic_spline(self.alpha_grid, self.g)

    def pstar_expectation(self, func):
        """E_{P*}[func] by the periodic rectangle rule."""
        dx = self.alpha_grid[1] - self.alpha_grid[0]
        return float(np.sum(func(self.alpha_grid) * self.pstar) * dx)

    def save(self, path):
        payload = {
            "alpha_grid": self.alpha_grid.tolist(),
            "V": self.v.tolist(),
            "g": self.g.tolist(),
            "Pstar": self.pstar.tolist(),
            "mean_drift": self.mean_drift,
            "meta": self.meta,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        return cls(alpha_grid=np.asarray(payload["alpha_grid"]),
                   v=np.asarray(payload["V"]), g=np.asarray(payload["g"]),
                   pstar=np.asarray(payload["Pstar"]),
                   mean_drift=float(payload["mean_drift"]),
                   meta=payload.get("meta", {}))


def _periodic_spline(grid, values):
    x = np.append(grid, grid[0] + 2.0 * np.pi)
    y = np.append(values, values[0])
    return CubicSpline(x, y, bc_type="periodic")


def noise_directions(frame: ManifoldFrame, nm: NoiseModel, alpha: float):
    """B(gamma_alpha) e_j for every real mode, stacked (n_modes, n, m)."""
    basis = NoiseBasis(frame.model.grid, nm)
    gam = frame.gamma(alpha)
    gain = nm.gain(gam.values[0])
    return (basis.scaled * gain[None, :])[:, None, :]


def drift_field(frame: ManifoldFrame, nm: NoiseModel, alpha: float,
                cfg: FlowConfig, t_infinity=None, tail_rtol=1e-6,
                tail_atol=1e-9):
    """Quadratic phase drift V(alpha) = 1/2 sum_k D2pi[B e_k, B e_k].

    The per-|k| contributions are monitored: for a smoothed noise model the
    geometric tail beyond K must stay below tail_rtol of the accumulated sum
    (with an absolute floor tail_atol for symmetry-cancelled sums), else K is
    too small. For a flat (white truncated) spectrum the finite sum is the
    noise model itself and no tail is extrapolated.
    """
    dirs = noise_directions(frame, nm, alpha)
    vals = d2pi_manifold_diagonal(frame, alpha, dirs, cfg,
                                  t_infinity=t_infinity)
    total = 0.5 * float(np.sum(vals))
    # fold cos/sin pairs into signed per-|k| contributions (the pair sum is
    # the translation-invariant quantity; individual modes cancel in pairs)
    per_k = np.empty(nm.k_max + 1)
    per_k[0] = abs(vals[0])
    per_k[1:] = np.abs(vals[1::2] + vals[2::2])
    scale = 0.5 * float(np.sum(per_k))
    tail = _geometric_tail(per_k)
    if tail is not None and tail > max(tail_rtol * scale, tail_atol):
        raise ValueError(
            f"estimated mode tail {tail:.3e} exceeds {tail_rtol:.0e} of the "
            f"running sum; raise the noise truncation K")
    return total


def _geometric_tail(per_k):
    """Extrapolated tail of a decaying per-mode contribution sequence."""
    if len(per_k) < 6:
        return None
    head = np.sum(np.abs(per_k[-6:-3]))
    last = np.sum(np.abs(per_k[-3:]))
    if head <= 0 or last >= head:
        return None  # not decaying: sum is exact by construction (white)
    ratio = last / head
    return float(last * ratio / (1.0 - ratio))


def diffusion_coeff(frame: ManifoldFrame, nm: NoiseModel, alpha: float,
                    floor=1e-10):
    """g(alpha) = sqrt(sum_k <psi*_alpha, B(gamma_alpha) e_k>^2)."""
    dirs = noise_directions(frame, nm, alpha)
    psis = frame.adjoint(alpha)
    proj = np.einsum("bnm,nm->b", dirs, psis.values) * frame.model.grid.dx
    g2 = float(np.sum(proj**2))
    if g2 < floor:
        raise PositivityError(
            f"projected noise intensity {g2:.3e} below the positivity floor")
    return float(np.sqrt(g2))


def tabulate_coeffs(frame: ManifoldFrame, nm: NoiseModel, cfg: FlowConfig,
                    n_alpha=64, check_points=8, equivariant=True,
                    t_infinity=None) -> ReducedCoeffs:
    """Tabulate V and g on a phase grid.

    For translation-equivariant model + noise the coefficients are constant
    in alpha; they are evaluated at `check_points` phases as a consistency
    check and the table is filled with the mean. Set equivariant=False to
    evaluate the full grid.
    """
    grid = np.linspace(0.0, 2.0 * np.pi, n_alpha, endpoint=False)
    eval_points = (np.linspace(0.0, 2.0 * np.pi, check_points, endpoint=False)
                   if equivariant else grid)
    v_vals = np.array([drift_field(frame, nm, a, cfg, t_infinity=t_infinity)
                       for a in eval_points])
    g_vals = np.array([diffusion_coeff(frame, nm, a) for a in eval_points])
    g_spread = float(np.ptp(g_vals) / np.mean(g_vals))
    v_spread = float(np.ptp(v_vals))
    if equivariant:
        v_tab = np.full(n_alpha, float(np.mean(v_vals)))
        g_tab = np.full(n_alpha, float(np.mean(g_vals)))
    else:
        v_tab, g_tab = v_vals, g_vals
    pstar, mean_drift = stationary_density(grid, v_tab, g_tab)
    meta = {
        "equivariant": equivariant,
        "check_points": int(len(eval_points)),
        "v_spread": v_spread,
        "g_relative_spread": g_spread,
        "k_max": nm.k_max,
        "sigma_free": True,
        "t_infinity": t_infinity or default_t_infinity(frame),
        "b_hat": frame.b_hat,
    }
    return ReducedCoeffs(grid, v_tab, g_tab, pstar, mean_drift, meta)


def stationary_density(alpha_grid, v, g):
    """Closed-form periodic Fokker-Planck density with constant current.

    For d(phi) = V dt + g dW the stationary density solves
    J = V P - d/dphi (D P) with D = g^2/2 and J fixed by periodicity:
    with h = D*P and Phi = int V/D,
        h(a) = exp(Phi(a)) [h0 - J int_0^a exp(-Phi)],
        J = h0 (1 - exp(-Phi(2pi))) / int_0^{2pi} exp(-Phi).
    Returns (P*, mean drift under P*).
    """
    g = np.asarray(g, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(g**2 / 2.0 <= 0):
        raise PositivityError("diffusion must be strictly positive")
    n = len(alpha_grid)
    dx = alpha_grid[1] - alpha_grid[0]
    d = g**2 / 2.0
    ratio = v / d
    # cumulative trapezoid of V/D on the closed grid [0, 2pi]
    ratio_c = np.append(ratio, ratio[0])
    phi = np.concatenate([[0.0], np.cumsum(0.5 * (ratio_c[1:] + ratio_c[:-1]) * dx)])
    phi -= phi.max()  # overflow guard
    exp_neg = np.exp(-phi)
    i_cum = np.concatenate([[0.0], np.cumsum(0.5 * (exp_neg[1:] + exp_neg[:-1]) * dx)])
    i_full = i_cum[-1]
    phi_l = phi[-1] - phi[0]
    h0 = 1.0
    current = h0 * (1.0 - np.exp(-phi_l)) / i_full
    h = np.exp(phi[:-1]) * (h0 - current * i_cum[:-1])
    p = h / d
    p = np.maximum(p, 0.0)
    z = np.sum(p) * dx
    p = p / z
    mean_drift = float(np.sum(v * p) * dx)
    return p, mean_drift


def simulate_reduced(coeffs: ReducedCoeffs, sigma, t_final, dt, seed,
                     alpha0=0.0, record_stride=1, n_paths=1):
    """Euler-Maruyama for the reduced circle diffusion, batched over paths.

    Returns (times, wrapped, unwrapped); the phase arrays have shape
    (n_paths, n_samples) squeezed to 1-D for a single path. Each path draws
    from its own counter-based stream keyed by (seed, path index).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    v_of = coeffs.v_of()
    g_of = coeffs.g_of()
    rngs = [path_rng(seed, i) for i in range(n_paths)]
    n_steps = int(np.round(t_final / dt))
    sqdt = np.sqrt(dt)
    phi = np.full(n_paths, float(alpha0))
    n_rec = n_steps // record_stride + 1
    out_t = np.zeros(n_rec)
    out_u = np.zeros((n_paths, n_rec))
    out_u[:, 0] = phi
    chunk = 1024
    step = 0
    rec_i = 1
    while step < n_steps:
        todo = min(chunk, n_steps - step)
        draws = np.stack([r.standard_normal(todo) for r in rngs])
        for j in range(todo):
            w = np.mod(phi, 2.0 * np.pi)
            phi = phi + sigma**2 * v_of(w) * dt \
                + sigma * g_of(w) * sqdt * draws[:, j]
            step += 1
            if step % record_stride == 0:
                out_t[rec_i] = step * dt
                out_u[:, rec_i] = phi
                rec_i += 1
    out_w = np.mod(out_u, 2.0 * np.pi)
    if n_paths == 1:
        return out_t, out_w[0], out_u[0]
    return out_t, out_w, out_u


def empirical_density(samples, n_bins=64):
    """Histogram density on [0, 2pi) from wrapped phase samples."""
    hist, edges = np.histogram(np.mod(samples, 2.0 * np.pi),
                               bins=n_bins, range=(0.0, 2.0 * np.pi),
                               density=True)
    return hist, edges


def tv_distance(density_a, density_b, dx):
    """Total variation distance between two densities on the same grid."""
    return 0.5 * float(np.sum(np.abs(density_a - density_b)) * dx)


def density_tv_check(coeffs: ReducedCoeffs, sigma=1.0, t_factor=200.0,
                     dt=5e-3, seed=123, n_bins=64, n_paths=64, burn_in=0.1):
    """Long-run histogram of the reduced SDE against the analytic density.

    An ensemble of paths is binned online (after a burn-in fraction), so the
    effective sample count scales with n_paths * horizon / mixing time.
    """
    t_final = t_factor / max(sigma**2, 1e-12)
    v_of = coeffs.v_of()
    g_of = coeffs.g_of()
    rngs = [path_rng(seed, i) for i in range(n_paths)]
    n_steps = int(np.round(t_final / dt))
    n_burn = int(burn_in * n_steps)
    sqdt = np.sqrt(dt)
    # spread initial conditions with the analytic law's support in mind
    phi = np.linspace(0.0, 2.0 * np.pi, n_paths, endpoint=False)
    counts = np.zeros(n_bins)
    edges = np.linspace(0.0, 2.0 * np.pi, n_bins + 1)
    chunk = 1024
    step = 0
    while step < n_steps:
        todo = min(chunk, n_steps - step)
        draws = np.stack([r.standard_normal(todo) for r in rngs])
        for j in range(todo):
            w = np.mod(phi, 2.0 * np.pi)
            phi = phi + sigma**2 * v_of(w) * dt \
                + sigma * g_of(w) * sqdt * draws[:, j]
            step += 1
            if step > n_burn:
                counts += np.histogram(np.mod(phi, 2.0 * np.pi),
                                       bins=n_bins,
                                       range=(0.0, 2.0 * np.pi))[0]
    dx = edges[1] - edges[0]
    hist = counts / (np.sum(counts) * dx)
    centers = 0.5 * (edges[1:] + edges[:-1])
    p_spline = _periodic_spline(coeffs.alpha_grid, coeffs.pstar)
    p_on_bins = np.maximum(p_spline(centers), 0.0)
    p_on_bins /= np.sum(p_on_bins) * dx
    return tv_distance(hist, p_on_bins, dx)


# ---------------------------------------------------------------------------
# comparisons against full-SPDE ensembles


def validate_schedule(sigmas, horizons, delta, c_declared=1.0,
                      min_rescaled=5.0):
    """Check the ergodic time window: sigma^2 t growing, t below the exit
    barrier exp(c * delta^2 / sigma^2)."""
    pairs = sorted(zip(sigmas, horizons), reverse=True)
    prev = None
    for sigma, t in pairs:
        resc = sigma**2 * t
        if resc < min_rescaled:
            raise ValueError(
                f"sigma={sigma}: rescaled horizon {resc:.2f} below "
                f"{min_rescaled}; sigma^2 t must grow as sigma decreases")
        if prev is not None and resc < prev:
            raise ValueError("schedule violates sigma^2 t -> infinity")
        barrier = np.exp(min(c_declared * delta**2 / sigma**2, 700.0))
        if t > barrier:
            raise ValueError(
                f"sigma={sigma}: horizon {t:.3g} exceeds the exit barrier "
                f"{barrier:.3g}")
        prev = resc
    return True


def ergodic_compare(ensembles: dict, coeffs: ReducedCoeffs, g_test,
                    epsilon, pstar_g=None):
    """Fractions of surviving paths whose time averages concentrate on P*(g).

    `ensembles` maps sigma to PathRecord lists simulated with the same
    g_test accumulator; `pstar_g` overrides the quadrature value of P*(g).
    Also aggregates the paired-noise closeness sup-differences when present.
    """
    target = (coeffs.pstar_expectation(g_test) if pstar_g is None
              else float(pstar_g))
    report = {"target": target, "epsilon": epsilon, "by_sigma": []}
    for sigma in sorted(ensembles, reverse=True):
        recs = ensembles[sigma]
        surviving = [r for r in recs if not r.exited]
        devs = [abs(r.g_average - target) for r in surviving
                if r.g_average is not None]
        frac = float(np.mean([d < epsilon for d in devs])) if devs else 0.0
        entry = {"sigma": sigma, "n_paths": len(recs),
                 "n_surviving": len(surviving), "fraction_within": frac,
                 "median_deviation": float(np.median(devs)) if devs else None}
        sups = [s for r in surviving if r.paired_sup is not None
                for s in r.paired_sup]
        if sups:
            entry["paired_sup_median"] = float(np.median(sups))
            entry["paired_sup_q90"] = float(np.percentile(sups, 90))
        report["by_sigma"].append(entry)
    return report


def drift_estimate(records, sigma, coeffs: ReducedCoeffs | None = None,
                   prediction=None, n_boot=2000, boot_seed=0, min_paths=100):
    """Monte Carlo noise-induced drift with a bootstrap CI vs the quadrature.

    The estimator is the path average of (unwrapped displacement)/(sigma^2 T)
    over non-exited paths; the prediction is P*(V) from the invariant
    measure.
    """
    surviving = [r for r in records if not r.exited]
    if len(surviving) < min_paths:
        raise ValueError(f"only {len(surviving)} surviving paths "
                         f"(need >= {min_paths})")
    t_final = surviving[0].times[-1]
    per_path = np.array([(r.unwrapped[-1] - r.unwrapped[0])
                         / (sigma**2 * t_final) for r in surviving])
    est = float(np.mean(per_path))
    rng = np.random.default_rng(boot_seed)
    idx = rng.integers(0, len(per_path), size=(n_boot, len(per_path)))
    boots = np.mean(per_path[idx], axis=1)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    if prediction is None:
        prediction = coeffs.mean_drift if coeffs is not None else 0.0
    return {
        "estimate": est,
        "ci_low": float(lo),
        "ci_high": float(hi),
        "prediction": float(prediction),
        "n_paths": len(surviving),
        "contains_prediction": bool(lo <= prediction <= hi),
        "sigma": sigma,
        "horizon": float(t_final),
    }
