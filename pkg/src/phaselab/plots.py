"""Figure rendering for pipeline artifacts.

Every plot is derived strictly from already-written CSV/JSON artifacts and
saved as SVG next to them; nothing here feeds back into the computations.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _load_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def plot_profile(frame_dir, out_path=None):
    """Profile, tangent and adjoint null vector from the frame CSV dumps."""
    frame_dir = Path(frame_dir)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, style in (("gamma0", "-"), ("psi0", "--"), ("psi_star0", ":")):
        data = _load_csv(frame_dir / f"{name}.csv")
        ax.plot(data[:, 0], data[:, 1], style, label=name)
    ax.set_xlabel("x")
    ax.set_ylabel("value")
    ax.legend(frameon=False)
    ax.set_title("stationary profile and frame vectors")
    out = out_path or frame_dir / "profile.svg"
    fig.savefig(out, bbox_inches="tight")
    plt.close(fig)
    return out


def plot_isochron_samples(csv_path, out_path=None):
    data = _load_csv(csv_path)
    fig, axes = plt.subplots(1, 2, figsize=(9.2, 3.8))
    axes[0].plot(data[:, 0], data[:, 1], "o", ms=4, label="flow")
    axes[0].plot(data[:, 0], data[:, 2], "x", ms=4, label="functional")
    axes[0].plot([0, 2 * np.pi], [0, 2 * np.pi], "k-", lw=0.5)
    axes[0].set_xlabel("true phase")
    axes[0].set_ylabel("recovered phase")
    axes[0].legend(frameon=False)
    axes[1].semilogy(data[:, 5], np.maximum(data[:, 4], 1e-16), "o", ms=4)
    axes[1].set_xlabel("tube distance")
    axes[1].set_ylabel("|asymptotic - projection| gap")
    fig.tight_layout()
    out = out_path or Path(csv_path).with_suffix(".svg")
    fig.savefig(out, bbox_inches="tight")
    plt.close(fig)
    return out


def plot_density_overlay(coeffs_path, histogram_csv=None, out_path=None):
    """Analytic stationary density with an optional empirical overlay."""
    with open(coeffs_path) as fh:
        payload = json.load(fh)
    grid = np.asarray(payload["alpha_grid"])
    pstar = np.asarray(payload["Pstar"])
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(grid, pstar, "-", label="stationary density")
    if histogram_csv is not None and Path(histogram_csv).exists():
        hist = _load_csv(histogram_csv)
        ax.step(hist[:, 0], hist[:, 1], where="mid", alpha=0.7,
                label="empirical")
    ax.axhline(1.0 / (2 * np.pi), color="k", lw=0.5, ls=":")
    ax.set_xlabel("phase")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    out = out_path or Path(coeffs_path).parent / "density_overlay.svg"
    fig.savefig(out, bbox_inches="tight")
    plt.close(fig)
    return out


def plot_drift_ci(drift_report_path, out_path=None):
    with open(drift_report_path) as fh:
        reports = json.load(fh)
    reports = [r for r in reports if "estimate" in r]
    if not reports:
        return None
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    xs = np.arange(len(reports))
    for i, r in enumerate(reports):
        ax.errorbar([i], [r["estimate"]],
                    yerr=[[r["estimate"] - r["ci_low"]],
                          [r["ci_high"] - r["estimate"]]],
                    fmt="o", capsize=4, color="C0")
        ax.plot([i - 0.2, i + 0.2], [r["prediction"]] * 2, "C3-")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"sigma={r['sigma']:g}" for r in reports])
    ax.set_ylabel("phase drift / sigma^2")
    ax.set_title("Monte Carlo drift (CI) vs quadrature prediction (red)")
    out = out_path or Path(drift_report_path).parent / "drift_ci.svg"
    fig.savefig(out, bbox_inches="tight")
    plt.close(fig)
    return out


def plot_exit_ecdf(ecdf_csv, out_path=None):
    with open(ecdf_csv) as fh:
        names = fh.readline().strip().split(",")
    data = _load_csv(ecdf_csv)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for j in range(1, data.shape[1]):
        ax.plot(data[:, 0], data[:, j], label=names[j])
    ax.set_xlabel("t")
    ax.set_ylabel("P(exit by t)")
    ax.legend(frameon=False)
    out = out_path or Path(ecdf_csv).with_suffix(".svg")
    fig.savefig(out, bbox_inches="tight")
    plt.close(fig)
    return out


def render_all(outdir):
    """Render every figure whose source artifacts exist under outdir."""
    outdir = Path(outdir)
    made = []
    if (outdir / "frame" / "gamma0.csv").exists():
        made.append(plot_profile(outdir / "frame"))
    if (outdir / "isochron_samples.csv").exists():
        made.append(plot_isochron_samples(outdir / "isochron_samples.csv"))
    if (outdir / "coeffs.json").exists():
        made.append(plot_density_overlay(outdir / "coeffs.json",
                                         outdir / "phase_histogram.csv"))
    if (outdir / "drift_report.json").exists():
        p = plot_drift_ci(outdir / "drift_report.json")
        if p:
            made.append(p)
    if (outdir / "exit_ecdf.csv").exists():
        made.append(plot_exit_ecdf(outdir / "exit_ecdf.csv"))
    return made
