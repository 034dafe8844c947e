"""Construction of the pattern manifold: stationary profile, tangent, adjoint.

The manifold is the translation orbit of a stationary profile gamma_0. A
pinned dense Newton iteration removes the translation null direction, the
adjoint null vector comes from a dense eigensolve of the transposed
linearization, and the contraction rate off the tangent is measured from the
linearized flow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from . import flow, models
from .spectral import (Field, deriv, inner, load_field_csv, norm, norm_e,
                       save_field_csv, shift)


class NewtonError(RuntimeError):
    """Stationary solve failed to converge or found a degenerate state."""


class NullspaceError(RuntimeError):
    """Adjoint null space is not one-dimensional within tolerance."""


@dataclass(frozen=True, eq=False)
class ManifoldFrame:
    """Precomputed data for the translation orbit of a stationary profile."""

    model: models.ModelSpec
    gamma0: Field       # profile at phase 0
    psi0: Field         # tangent d(gamma_alpha)/d(alpha) at 0
    psi_star0: Field    # adjoint null vector, <psi*, psi> = 1
    b_hat: float        # measured off-tangent decay rate
    newton_residual: float
    spectral_gap: float
    decay_fit_r2: float
    goldstone_residual: float
    adjoint_residual: float

    @property
    def length(self):
        return self.model.grid.length

    def gamma(self, alpha: float) -> Field:
        """Profile at phase alpha (translation by +alpha)."""
        return shift(self.gamma0, alpha)

    def tangent(self, alpha: float) -> Field:
        return shift(self.psi0, alpha)

    def adjoint(self, alpha: float) -> Field:
        return shift(self.psi_star0, alpha)


def linearization_matrix(m: models.ModelSpec, u: Field):
    """Dense matrix of L = A + DN(u) acting on grid samples."""
    mg = m.grid.m
    eye = np.eye(mg)
    # rows of `eye` are basis vectors; evaluate on the batch and transpose
    a_rows = np.fft.irfft(np.fft.rfft(eye, axis=-1) * m.linear.full_symbol()[0],
                          n=mg, axis=-1)
    dn_rows = models.eval_DN_values(m, u.values, eye)
    return a_rows.T + dn_rows.T


def heaviside_bump_guess(m: models.ModelSpec) -> Field:
    """Closed-form bump amplitude of the sharp-threshold ring model.

    For the cosine kernel, the infinite-gain fixed point is a*cos(x) with
    a^2 = 2*a1^2 + 2*a1*sqrt(a1^2 - h^2); a good Newton seed at finite gain.
    """
    a1, h = m.params["a1"], m.params["threshold"]
    if a1 <= h:
        raise ValueError("no bump exists for kernel amplitude <= threshold")
    amp = np.sqrt(2.0 * a1**2 + 2.0 * a1 * np.sqrt(a1**2 - h**2))
    x = m.grid.x
    return Field(m.grid, amp * np.cos(2.0 * np.pi * x / m.grid.length)[None, :])


def kink_pair_guess(grid, diffusion=1.0) -> Field:
    """Balanced-cubic kink/antikink pair on the ring (Newton seed)."""
    x = grid.x
    w = 2.0 * np.sqrt(2.0 * diffusion)
    u = 0.5 * (np.tanh((x - grid.length / 4.0) / w)
               - np.tanh((x - 3.0 * grid.length / 4.0) / w))
    return Field(grid, u[None, :])


def compute_stationary(m: models.ModelSpec, guess: Field, tol=1e-10,
                       max_iter=40) -> Field:
    """Pinned Newton solve of V(gamma) = 0.

    The pinning constraint <d_x guess, gamma - guess> = 0 removes the
    translation direction; the bordered dense system stays well conditioned.
    """
    pin = deriv(guess).values.ravel()
    if np.linalg.norm(pin) < 1e-10 * max(1.0, norm(guess)):
        raise NewtonError("guess is constant: translation tangent vanishes")
    mg = m.grid.m
    u = guess.values.copy()
    res_prev = np.inf
    for _ in range(max_iter):
        f = models.eval_V(m, Field(m.grid, u))
        res = norm(f)
        if res <= tol:
            break
        jac = linearization_matrix(m, Field(m.grid, u))
        bordered = np.zeros((mg + 1, mg + 1))
        bordered[:mg, :mg] = jac
        bordered[:mg, mg] = pin
        bordered[mg, :mg] = pin
        rhs = np.concatenate([-f.values.ravel(),
                              [-float(pin @ (u.ravel() - guess.values.ravel()))]])
        sol = np.linalg.solve(bordered, rhs)
        step = sol[:mg].reshape(u.shape)
        # backtracking keeps distant seeds from overshooting
        scale = 1.0
        for _ in range(8):
            trial = u + scale * step
            res_trial = norm(models.eval_V(m, Field(m.grid, trial)))
            if res_trial < res or res < 1e-13:
                break
            scale *= 0.5
        u = u + scale * step
        if not np.all(np.isfinite(u)):
            raise NewtonError("Newton iteration diverged")
        res_prev = res
    else:
        raise NewtonError(f"no convergence after {max_iter} iterations "
                          f"(residual {res_prev:.3e})")
    gamma = Field(m.grid, u)
    if norm(deriv(gamma)) < 1e-8 * max(1.0, norm(gamma)):
        raise NewtonError("converged to a constant state (zero tangent)")
    return gamma


def center_profile(gamma: Field) -> Field:
    """Shift the profile so its dominant Fourier mode has zero phase.

    Gives a canonical, reproducible representative of the translation orbit
    (for the flagship bump this puts the peak at x = 0 and makes gamma even).
    """
    c = np.fft.rfft(gamma.values[0])
    k = int(np.argmax(np.abs(c[1:])) + 1)
    x0 = -np.angle(c[k]) / (2.0 * np.pi * k / gamma.grid.length)
    return shift(gamma, -x0)


def adjoint_null(m: models.ModelSpec, gamma0: Field, psi0: Field,
                 gap_min=1e-3):
    """Null vector of the adjoint linearization, normalized against psi0.

    Returns (psi_star, spectral_gap, adjoint_residual). Fails when the
    candidate null space is not one-dimensional within tolerance.
    """
    lin = linearization_matrix(m, gamma0)
    eigvals, eigvecs = scipy.linalg.eig(lin.T)
    order = np.argsort(np.abs(eigvals))
    lam0, lam1 = eigvals[order[0]], eigvals[order[1]]
    gap = float(np.abs(lam1))
    if gap < max(gap_min, 10.0 * np.abs(lam0)):
        raise NullspaceError(
            f"null space not one-dimensional: |lambda_0|={np.abs(lam0):.3e}, "
            f"|lambda_1|={gap:.3e}")
    vec = np.real(eigvecs[:, order[0]])
    psi_star = Field(m.grid, vec[None, :])
    scale = inner(psi_star, psi0)
    if abs(scale) < 1e-12:
        raise NullspaceError("null vector is orthogonal to the tangent")
    psi_star = (1.0 / scale) * psi_star
    residual = float(np.linalg.norm(lin.T @ psi_star.values.ravel())
                     * np.sqrt(m.grid.dx))
    return psi_star, gap, residual


def build_frame(m: models.ModelSpec, guess: Field | None = None,
                flow_cfg: flow.FlowConfig | None = None, decay_seed=0,
                gap_min=1e-3) -> ManifoldFrame:
    """Compute the full manifold frame for a model."""
    if guess is None:
        if m.kind == "neural-field-ring":
            guess = heaviside_bump_guess(m)
        else:
            guess = kink_pair_guess(m.grid, m.params.get("diffusion", 1.0))
    if flow_cfg is None:
        flow_cfg = flow.FlowConfig()
    gamma0 = center_profile(compute_stationary(m, guess))
    residual = norm(models.eval_V(m, gamma0))
    psi0 = -1.0 * deriv(gamma0)
    psi_star0, gap, adj_res = adjoint_null(m, gamma0, psi0, gap_min=gap_min)
    lin = linearization_matrix(m, gamma0)
    goldstone = float(np.linalg.norm(lin @ psi0.values.ravel())
                      * np.sqrt(m.grid.dx))
    b_hat, r2 = flow.measure_decay_rate(m, gamma0, psi0, psi_star0, flow_cfg,
                                        seed=decay_seed)
    return ManifoldFrame(model=m, gamma0=gamma0, psi0=psi0,
                         psi_star0=psi_star0, b_hat=b_hat,
                         newton_residual=residual, spectral_gap=gap,
                         decay_fit_r2=r2, goldstone_residual=goldstone,
                         adjoint_residual=adj_res)


def save_frame(frame: ManifoldFrame, outdir):
    """Write frame.json plus CSV dumps of the three profile fields."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, fld in (("gamma0", frame.gamma0), ("psi0", frame.psi0),
                      ("psi_star0", frame.psi_star0)):
        save_field_csv(fld, outdir / f"{name}.csv")
    meta = {
        "model_kind": frame.model.kind,
        "grid": {"m": frame.model.grid.m, "length": frame.model.grid.length},
        "b_hat": frame.b_hat,
        "newton_residual": frame.newton_residual,
        "spectral_gap": frame.spectral_gap,
        "decay_fit_r2": frame.decay_fit_r2,
        "goldstone_residual": frame.goldstone_residual,
        "adjoint_residual": frame.adjoint_residual,
        "profile_norm": norm(frame.gamma0),
        "profile_norm_e": norm_e(frame.gamma0),
    }
    with open(outdir / "frame.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_frame(m: models.ModelSpec, outdir) -> ManifoldFrame:
    outdir = Path(outdir)
    with open(outdir / "frame.json") as fh:
        meta = json.load(fh)
    return ManifoldFrame(
        model=m,
        gamma0=load_field_csv(outdir / "gamma0.csv"),
        psi0=load_field_csv(outdir / "psi0.csv"),
        psi_star0=load_field_csv(outdir / "psi_star0.csv"),
        b_hat=meta["b_hat"], newton_residual=meta["newton_residual"],
        spectral_gap=meta["spectral_gap"], decay_fit_r2=meta["decay_fit_r2"],
        goldstone_residual=meta["goldstone_residual"],
        adjoint_residual=meta["adjoint_residual"])
