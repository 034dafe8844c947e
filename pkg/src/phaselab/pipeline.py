"""Configuration-driven experiment stages with reproducible artifacts.

Stages: wave, isochron, derivs, simulate, reduce, compare, exit-stats, all.
Each stage writes machine-readable artifacts (CSV/JSON) into the output
directory and registers them, with checksums and headline quantities, in
manifest.json. Reruns with the same config and seed reproduce byte-identical
numeric artifacts; a failing stage removes its partial outputs.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import models, reduction, stochastic
from .config import config_hash, dump_normalized, horizon_for
from .flow import FlowConfig
from .isochron import (circle_distance, isochron_flow, isochron_newton,
                       variational_phase, dpi, wrap_phase)
from .manifold import build_frame, load_frame, save_frame
from .models import dump_kernel_csv
from .spectral import Field, Grid, inner, norm, norm_e
from .stochastic import (GainSpec, NoiseModel, SimOptions, save_ensemble_summary,
                         simulate_ensemble, smoothed_noise, white_noise)

STAGES = ("wave", "isochron", "derivs", "simulate", "reduce", "compare",
          "exit-stats", "all")


class StageError(RuntimeError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(message)


def build_model(cfg) -> models.ModelSpec:
    g = Grid(cfg["grid"]["m"], cfg["grid"]["length"])
    mdl = cfg["model"]
    if mdl["kind"] == "neural-field-ring":
        return models.neural_field_ring(
            g, a1=mdl["a1"], a2=mdl["a2"], beta=mdl["beta"],
            threshold=mdl["threshold"], decay=mdl["decay"])
    return models.nagumo_comoving(g, a=mdl["a"], diffusion=mdl["diffusion"],
                                  speed=mdl["speed"])


def build_noise(cfg, sigma) -> NoiseModel:
    nse = cfg["noise"]
    gain = GainSpec(kind=nse["gain_kind"], coeff=nse["gain_coeff"],
                    center=nse["gain_center"],
                    sharpness=nse["gain_sharpness"])
    if nse["profile"] == "white":
        return white_noise(nse["k_max"], sigma, gain)
    return smoothed_noise(nse["k_max"], nse["kappa"], sigma, gain)


def flow_config(cfg) -> FlowConfig:
    f = cfg["flow"]
    return FlowConfig(dt=f["dt"], scheme=f["scheme"], t_max=f["t_max"],
                      convergence_tol=f["tol_converge"])


def default_delta(frame):
    """Tube radius: a fraction of the profile size, shrunk with the gap."""
    return 0.2 * norm_e(frame.gamma0) * min(1.0, frame.spectral_gap)


def _g_test_fn(name):
    return {"cos": np.cos, "sin": np.sin, "none": None}[name]


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _smooth_tube_perturbation(grid, rng, k_lim=8):
    v = np.zeros(grid.m)
    for k in range(1, k_lim + 1):
        v += rng.standard_normal() * np.cos(2 * np.pi * k * grid.x / grid.length)
        v += rng.standard_normal() * np.sin(2 * np.pi * k * grid.x / grid.length)
    f = Field(grid, v[None, :])
    return (1.0 / norm_e(f)) * f


def _simulate_block(args):
    """Worker: one fixed-size block of paths (picklable top-level)."""
    frame, nm, x0, t_final, delta, seed, n, opts, offset = args
    return stochastic.simulate_ensemble(frame, nm, x0, t_final, delta, seed,
                                        n, opts, path_offset=offset)


class Pipeline:
    """Stage runner bound to a validated config and an output directory."""

    def __init__(self, cfg, outdir, threads=1):
        self.cfg = cfg
        self.out = Path(outdir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = max(1, int(threads))
        self.flow_cfg = flow_config(cfg)
        self.model = build_model(cfg)
        self._frame = None
        self._coeffs = None
        self.manifest = {
            "config_hash": config_hash(cfg),
            "master_seed": cfg["run"]["master_seed"],
            "stages": {},
            "quantities": {},
        }

    # -- frame and tube -----------------------------------------------------

    @property
    def frame(self):
        if self._frame is None:
            frame_dir = self.out / "frame"
            if (frame_dir / "frame.json").exists():
                self._frame = load_frame(self.model, frame_dir)
            else:
                self._frame = build_frame(self.model, flow_cfg=self.flow_cfg)
        return self._frame

    @property
    def delta(self):
        d = self.cfg["tube"]["delta"]
        return d if d > 0 else default_delta(self.frame)

    def coeffs(self):
        if self._coeffs is None:
            path = self.out / "coeffs.json"
            if path.exists():
                self._coeffs = reduction.ReducedCoeffs.load(path)
            else:
                self._coeffs = self._tabulate()
        return self._coeffs

    def _tabulate(self):
        red = self.cfg["reduction"]
        sig = self.cfg["noise"]["sigma"] or [0.0]
        nm = build_noise(self.cfg, sig[0])
        t_inf = red["t_infinity"] if red["t_infinity"] > 0 else None
        return reduction.tabulate_coeffs(
            self.frame, nm, self.flow_cfg, n_alpha=red["n_alpha"],
            check_points=red["check_points"],
            equivariant=red["equivariant"], t_infinity=t_inf)

    # -- bookkeeping ----------------------------------------------------------

    def _record(self, stage, files, quantities):
        entry = {"artifacts": {str(Path(f).relative_to(self.out)): _sha256(f)
                               for f in files},
                 "quantities": quantities}
        self.manifest["stages"][stage] = entry
        self.manifest["quantities"].update(quantities)

    def _write_manifest(self):
        dump_normalized(self.cfg, self.out / "config_normalized.json")
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def run(self, stage):
        if stage not in STAGES:
            raise StageError(stage, f"unknown stage (choose from {STAGES})")
        order = [s for s in STAGES if s != "all"] if stage == "all" else [stage]
        for s in order:
            if stage == "all" and self.cfg["run"]["paths"] == 0 and \
                    s in ("simulate", "compare", "exit-stats"):
                continue  # deterministic stages only
            self._run_one(s)
        self._write_manifest()
        if self.cfg["output"]["plots"]:
            from . import plots
            plots.render_all(self.out)
        return self.manifest

    def _run_one(self, stage):
        runner = {
            "wave": self.stage_wave,
            "isochron": self.stage_isochron,
            "derivs": self.stage_derivs,
            "simulate": self.stage_simulate,
            "reduce": self.stage_reduce,
            "compare": self.stage_compare,
            "exit-stats": self.stage_exit_stats,
        }[stage]
        created = []
        try:
            runner(created)
        except Exception as e:
            for f in created:
                Path(f).unlink(missing_ok=True)
            if isinstance(e, StageError):
                raise
            raise StageError(stage, f"{type(e).__name__}: {e}") from e

    # -- stages ---------------------------------------------------------------

    def stage_wave(self, created):
        frame_dir = self.out / "frame"
        self._frame = build_frame(self.model, flow_cfg=self.flow_cfg)
        save_frame(self._frame, frame_dir)
        for name in ("frame.json", "gamma0.csv", "gamma0.csv.json", "psi0.csv",
                     "psi0.csv.json", "psi_star0.csv", "psi_star0.csv.json"):
            created.append(frame_dir / name)
        if self.model.kind == "neural-field-ring":
            dump_kernel_csv(self.model, frame_dir / "kernel.csv")
            created.append(frame_dir / "kernel.csv")
        fr = self._frame
        self._record("wave", created, {
            "b_hat": fr.b_hat,
            "newton_residual": fr.newton_residual,
            "spectral_gap": fr.spectral_gap,
            "goldstone_residual": fr.goldstone_residual,
            "adjoint_residual": fr.adjoint_residual,
            "decay_fit_r2": fr.decay_fit_r2,
            "delta": self.delta,
        })

    def stage_isochron(self, created):
        rng = np.random.default_rng(self.cfg["run"]["master_seed"])
        n = self.cfg["run"]["isochron_samples"]
        delta = self.delta
        rows = []
        for _ in range(n):
            alpha = rng.uniform(0.0, 2.0 * np.pi)
            pert = _smooth_tube_perturbation(self.model.grid, rng)
            amp = 0.25 * delta * rng.uniform(0.5, 1.0)
            x = self.frame.gamma(alpha) + amp * pert
            pi_f = isochron_flow(self.frame, x, self.flow_cfg)
            pi_n = isochron_newton(self.frame, x, self.flow_cfg)
            beta = variational_phase(self.frame, x)
            gap = circle_distance(pi_f, beta, self.frame.length)
            dist = norm_e(x - self.frame.gamma(pi_f))
            rows.append((alpha, pi_f, pi_n, beta, gap, dist))
        path = self.out / "isochron_samples.csv"
        np.savetxt(path, np.asarray(rows), delimiter=",",
                   header="alpha_true,pi_flow,pi_newton,beta,gap,dist",
                   comments="")
        created.append(path)
        rows = np.asarray(rows)
        cross = np.max(circle_distance(rows[:, 1], rows[:, 2]))
        self._record("isochron", created, {
            "isochron_cross_method_max": float(cross),
            "isochron_gap_median": float(np.median(rows[:, 4])),
        })

    def stage_derivs(self, created):
        fr = self.frame
        rng = np.random.default_rng(self.cfg["run"]["master_seed"] + 1)
        y = _smooth_tube_perturbation(self.model.grid, rng)
        z = _smooth_tube_perturbation(self.model.grid, rng)
        alpha = rng.uniform(0.0, 2.0 * np.pi)
        ga = fr.gamma(alpha)
        d_lin = dpi(fr, ga, y, self.flow_cfg, alpha=alpha)
        lin_err = abs(d_lin - inner(fr.adjoint(alpha), y))
        from .isochron import d2pi
        d_yz = d2pi(fr, ga, y, z, self.flow_cfg, alpha=alpha)
        d_zy = d2pi(fr, ga, z, y, self.flow_cfg, alpha=alpha)
        report = {
            "dpi_adjoint_identity_error": lin_err,
            "d2pi_value": d_yz,
            "d2pi_symmetry_error": abs(d_yz - d_zy),
            "alpha": alpha,
        }
        path = self.out / "derivs.json"
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        created.append(path)
        self._record("derivs", created, {
            "dpi_adjoint_identity_error": lin_err,
            "d2pi_symmetry_error": report["d2pi_symmetry_error"],
        })

    # -- ensembles ------------------------------------------------------------

    def _run_ensemble(self, nm, t_final, opts, seed):
        n_paths = self.cfg["run"]["paths"]
        block = max(1, self.cfg["run"]["path_block"])
        x0 = self.frame.gamma0
        jobs = []
        off = 0
        while off < n_paths:
            n = min(block, n_paths - off)
            jobs.append((self.frame, nm, x0, t_final, self.delta, seed, n,
                         opts, off))
            off += n
        if self.threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(_simulate_block, jobs))
        else:
            results = [_simulate_block(j) for j in jobs]
        records = [r for block_records in results for r in block_records]
        return records

    def stage_simulate(self, created):
        run = self.cfg["run"]
        quantities = {}
        for sigma in self.cfg["noise"]["sigma"]:
            nm = build_noise(self.cfg, sigma)
            t_final = horizon_for(self.cfg, sigma)
            subdir = self.out / f"sim_sigma_{sigma:g}"
            subdir.mkdir(parents=True, exist_ok=True)
            opts = SimOptions(
                dt=self.flow_cfg.dt, stride=run["stride"],
                scheme=self.flow_cfg.scheme, max_audits=run["max_audits"],
                record_every=run["record_every"],
                g_test=_g_test_fn(run["g_test"]),
                replay_dir=subdir / "replay" if run["replay"] else None)
            records = self._run_ensemble(nm, t_final, opts, run["master_seed"])
            for i, rec in enumerate(records):
                p = subdir / f"path_{i:04d}.csv"
                rec.to_csv(p)
                created.append(p)
            if run["replay"]:
                created.extend(sorted((subdir / "replay").glob("*.bin")))
            summary = subdir / "summary.json"
            t_grid = np.linspace(0.0, t_final, 33)[1:]
            save_ensemble_summary(records, summary, t_grid)
            created.append(summary)
            quantities[f"exited_sigma_{sigma:g}"] = \
                int(sum(r.exited for r in records))
        self._record("simulate", created, quantities)

    def stage_reduce(self, created):
        self._coeffs = self._tabulate()
        path = self.out / "coeffs.json"
        self._coeffs.save(path)
        created.append(path)
        self._record("reduce", created, {
            "mean_drift": self._coeffs.mean_drift,
            "pstar_v": self._coeffs.pstar_expectation(self._coeffs.v_of()),
            "reduced_g": float(self._coeffs.g[0]),
            "reduced_v": float(self._coeffs.v[0]),
        })

    def stage_compare(self, created):
        run = self.cfg["run"]
        coeffs = self.coeffs()
        sigmas = self.cfg["noise"]["sigma"]
        horizons = [horizon_for(self.cfg, s) for s in sigmas]
        if run["t_sigma_factor"] > 0:
            reduction.validate_schedule(sigmas, horizons, self.delta,
                                        c_declared=run["concentration_c"])
        g_test = _g_test_fn(run["g_test"]) or np.cos
        ensembles = {}
        drift_reports = []
        all_phases = []
        for sigma in sigmas:
            nm = build_noise(self.cfg, sigma)
            opts = SimOptions(
                dt=self.flow_cfg.dt, stride=run["stride"],
                scheme=self.flow_cfg.scheme, max_audits=run["max_audits"],
                record_every=run["record_every"], g_test=g_test,
                pair_reduced=run["pair_reduced"],
                v_alpha=float(coeffs.v[0]))
            records = self._run_ensemble(nm, horizon_for(self.cfg, sigma),
                                         opts, run["master_seed"])
            ensembles[sigma] = records
            min_paths = 100 if run["paths"] >= 100 else 2
            try:
                drift_reports.append(reduction.drift_estimate(
                    records, sigma, coeffs=coeffs, min_paths=min_paths))
            except ValueError as e:
                drift_reports.append({"sigma": sigma, "error": str(e)})
            for rec in records:
                if not rec.exited:
                    all_phases.append(rec.phases[len(rec.phases) // 5:])
        report = reduction.ergodic_compare(ensembles, coeffs, g_test,
                                           epsilon=run["epsilon"])
        path = self.out / "compare_report.json"
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        created.append(path)
        dpath = self.out / "drift_report.json"
        with open(dpath, "w") as fh:
            json.dump(drift_reports, fh, indent=2, sort_keys=True)
            fh.write("\n")
        created.append(dpath)
        # empirical phase histogram for the density overlay
        if all_phases:
            hist, edges = np.histogram(np.concatenate(all_phases), bins=64,
                                       range=(0.0, 2.0 * np.pi), density=True)
            centers = 0.5 * (edges[1:] + edges[:-1])
            hpath = self.out / "phase_histogram.csv"
            np.savetxt(hpath, np.column_stack([centers, hist]), delimiter=",",
                       header="alpha,density", comments="")
            created.append(hpath)
        quantities = {"ergodic_target": report["target"]}
        for entry in report["by_sigma"]:
            quantities[f"fraction_within_sigma_{entry['sigma']:g}"] = \
                entry["fraction_within"]
        for dr in drift_reports:
            if "estimate" in dr:
                quantities[f"drift_estimate_sigma_{dr['sigma']:g}"] = \
                    dr["estimate"]
        self._record("compare", created, quantities)

    def stage_exit_stats(self, created):
        run = self.cfg["run"]
        ensembles = {}
        for sigma in self.cfg["noise"]["sigma"]:
            nm = build_noise(self.cfg, sigma)
            opts = SimOptions(dt=self.flow_cfg.dt, stride=run["stride"],
                              scheme=self.flow_cfg.scheme,
                              max_audits=min(run["max_audits"], 4),
                              record_every=run["record_every"])
            ensembles[sigma] = self._run_ensemble(
                nm, horizon_for(self.cfg, sigma), opts, run["master_seed"])
        t_final = max(horizon_for(self.cfg, s) for s in self.cfg["noise"]["sigma"])
        t_ref = run["t_ref_fraction"] * t_final
        stats = stochastic.exit_time_stats(ensembles, t_ref, self.delta)
        path = self.out / "exit_report.json"
        with open(path, "w") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
            fh.write("\n")
        created.append(path)
        t_grid = np.linspace(0.0, t_final, 65)[1:]
        cols = [t_grid]
        names = ["t"]
        for sigma in sorted(ensembles, reverse=True):
            cols.append(stochastic.exit_ecdf(ensembles[sigma], t_grid))
            names.append(f"p_sigma_{sigma:g}")
        epath = self.out / "exit_ecdf.csv"
        np.savetxt(epath, np.column_stack(cols), delimiter=",",
                   header=",".join(names), comments="")
        created.append(epath)
        quantities = {}
        if "slope" in stats:
            quantities["exit_fit_slope"] = stats["slope"]
            quantities["exit_fit_r2"] = stats["r_squared"]
            quantities["exit_c_estimate"] = stats["c_estimate"]
        self._record("exit-stats", created, quantities)


def run_pipeline(cfg, stage, outdir, threads=1):
    """Run one stage (or `all`); returns the manifest dict."""
    pipe = Pipeline(cfg, outdir, threads=threads)
    return pipe.run(stage)
