"""Experiment configuration: TOML (or JSON) file -> validated, normalized dict.

Every run is driven by a single config file with the blocks model, grid,
flow, noise, tube, reduction, run, output. Validation fills all defaults
explicitly, reports every violated invariant with its field path, and warns
(without failing) when the tube radius is outside the small-noise
concentration window delta > sigma^2.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration; carries the list of violations."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


DEFAULTS = {
    "model": {
        "kind": "neural-field-ring",
        "a1": 1.0, "a2": 0.0, "beta": 20.0, "threshold": 0.3, "decay": 1.0,
        # reaction-diffusion parameters
        "a": 0.5, "diffusion": 1.0, "speed": None,
    },
    "grid": {"m": 256, "length": 2.0 * np.pi},
    "flow": {"dt": 0.01, "scheme": "etd-rk2", "t_max": 200.0,
             "tol_converge": 1e-8},
    "noise": {"k_max": 16, "profile": "smoothed", "kappa": 0.05,
              "sigma": [], "gain_kind": "none", "gain_coeff": 0.0,
              "gain_center": 0.0, "gain_sharpness": 1.0},
    "tube": {"delta": 0.0, "norm": "h1"},  # delta 0 => auto from profile
    "reduction": {"n_alpha": 64, "check_points": 4, "t_infinity": 0.0,
                  "equivariant": True},
    "run": {"paths": 0, "t_final": 0.0, "t_sigma_factor": 0.0, "stride": 20,
            "record_every": 1, "master_seed": 12345, "max_audits": 24,
            "g_test": "cos", "pair_reduced": False, "replay": False,
            "path_block": 32, "isochron_samples": 12, "epsilon": 0.1,
            "t_ref_fraction": 0.8, "concentration_c": 1.0},
    "output": {"directory": "out", "plots": False},
}

_SCHEMES = ("exponential-euler", "etd-rk2")
_PROFILES = ("white", "smoothed")
_GAINS = ("none", "linear", "threshold")
_KINDS = ("neural-field-ring", "reaction-diffusion-comoving")
_G_TESTS = ("cos", "sin", "none")


def load_config(path):
    """Read TOML (default) or JSON and return (normalized, warnings)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    text = path.read_bytes()
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError([f"invalid JSON: {e}"]) from e
    else:
        try:
            raw = tomllib.loads(text.decode())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError([f"invalid TOML: {e}"]) from e
    return validate_config(raw)


def validate_config(raw):
    """Normalize a raw mapping; returns (config, warnings) or raises
    ConfigError with every violation named by its field path."""
    errors, warnings = [], []
    cfg = copy.deepcopy(DEFAULTS)
    for block, values in raw.items():
        if block not in cfg:
            warnings.append(f"unknown block [{block}] ignored")
            continue
        if not isinstance(values, dict):
            errors.append(f"{block}: expected a table/object")
            continue
        for key, val in values.items():
            if key not in cfg[block]:
                warnings.append(f"unknown key {block}.{key} ignored")
            else:
                cfg[block][key] = val
    if errors:
        raise ConfigError(errors)

    mdl, grd, flw = cfg["model"], cfg["grid"], cfg["flow"]
    nse, tube, run = cfg["noise"], cfg["tube"], cfg["run"]

    if mdl["kind"] not in _KINDS:
        errors.append(f"model.kind must be one of {_KINDS}")
    if mdl["kind"] == "neural-field-ring" and mdl["beta"] <= 0:
        errors.append("model.beta must be positive")
    if not (isinstance(grd["m"], int) and grd["m"] >= 16 and grd["m"] % 2 == 0):
        errors.append("grid.m must be an even integer >= 16")
    if grd["length"] <= 0:
        errors.append("grid.length must be positive")
    if flw["dt"] <= 0:
        errors.append("flow.dt must be positive")
    if flw["scheme"] not in _SCHEMES:
        errors.append(f"flow.scheme must be one of {_SCHEMES}")
    if flw["tol_converge"] <= 0:
        errors.append("flow.tol_converge must be positive")
    if nse["profile"] not in _PROFILES:
        errors.append(f"noise.profile must be one of {_PROFILES}")
    if nse["gain_kind"] not in _GAINS:
        errors.append(f"noise.gain_kind must be one of {_GAINS}")
    sig = nse["sigma"]
    if not isinstance(sig, (list, tuple)) or len(sig) == 0:
        if run["paths"] > 0:
            errors.append("noise.sigma: a non-empty list is required")
        sig = []
    else:
        sig = [float(s) for s in sig]
        if any(s < 0 for s in sig):
            errors.append("noise.sigma: amplitudes must be nonnegative")
        if sorted(sig, reverse=True) != sig:
            errors.append("noise.sigma: list must be sorted descending")
    nse["sigma"] = sig
    if isinstance(grd["m"], int) and nse["k_max"] > grd["m"] // 3:
        errors.append(
            f"noise.k_max: {nse['k_max']} exceeds the dealiasing headroom "
            f"m/3 = {grd['m'] // 3}")
    if run["paths"] < 0:
        errors.append("run.paths must be nonnegative")
    if run["paths"] > 0 and run["t_final"] <= 0 and run["t_sigma_factor"] <= 0:
        errors.append("run: one of t_final or t_sigma_factor must be positive")
    if run["stride"] < 1:
        errors.append("run.stride must be >= 1")
    if run["g_test"] not in _G_TESTS:
        errors.append(f"run.g_test must be one of {_G_TESTS}")
    if tube["norm"].lower() not in ("h1",):
        errors.append("tube.norm: only the H1 tube norm is implemented")
    if tube["delta"] < 0:
        errors.append("tube.delta must be nonnegative (0 selects the default)")
    if errors:
        raise ConfigError(errors)

    if sig and tube["delta"] > 0 and tube["delta"] <= max(sig) ** 2:
        warnings.append(
            f"tube.delta = {tube['delta']} is not above sigma^2 = "
            f"{max(sig)**2:.3g}: outside the concentration window "
            f"delta in (sigma^2, delta*)")
    return cfg, warnings


def horizon_for(cfg, sigma):
    """Run horizon: fixed t_final or the sigma-scaled window factor/sigma^2."""
    run = cfg["run"]
    if run["t_sigma_factor"] > 0:
        return run["t_sigma_factor"] / sigma**2
    return run["t_final"]


def config_hash(cfg):
    """Stable hash of the normalized config."""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_normalized(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
