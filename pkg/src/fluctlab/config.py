"""JSON run configuration: defaults, schema validation and object construction."""
from __future__ import annotations

import copy
import json
from importlib import resources

import jsonschema

from .model import DeviationScale, FluxModel, NoiseModel, TorusGrid
from .solvers import Setup, SolverConfig

DEFAULT_CONFIG = {
    "grid": {"n_cells": 128},
    "flux": {"kind": "burgers"},
    "noise": {"n_modes": 8, "gamma0": 0.25, "decay": 2.0, "state_factor": "linear",
              "drop_constant": False},
    "scale": {"alpha": 0.25},
    "solver": {"cfl": 0.4, "t_end": 1.0, "viscosity": 0.0, "scheme": "engquist_osher",
               "output_stride": 1, "frame_shift": True, "diffusion": "spectral", "n_steps": None},
    "experiment": {
        "seed": 0,
        "replicates": 200,
        "parallel": 1,
        "eps_grid": [1e-1, 1e-2, 1e-3, 1e-4],
        "q": 2.0,
        "scaling_eta": 0.01,
        "gap_eps_grid": [1e-1, 1e-2, 1e-3],
        "gap_eta_grid": [0.1, 0.03, 0.01],
        "h_gap_eta": 0.05,
        "clt_companion_etas": [],
        "hypothesis_samples": 10000,
        "skeleton": {"mode": 2, "amplitude": 1.0},
        "event": {"functional": "terminal_l1_norm", "threshold": 0.5},
        "mdp": {"delta": 0.1, "control_mode": 2, "control_amplitude": 1.0,
                "oscillations": [2, 4, 8, 16, 32, 64], "perturbation_mode": 1,
                "perturbation_amplitude": 1.0, "importance_sampling": True},
    },
}


class ConfigError(ValueError):
    """Invalid or unreadable configuration; the message names the offending path."""


def schema() -> dict:
    return json.loads(resources.files("fluctlab").joinpath("config_schema.json").read_text("utf-8"))


def _path_str(path) -> str:
    out = "$"
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def validate(doc) -> None:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        msgs = [f"{_path_str(e.absolute_path)}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration\n  " + "\n  ".join(msgs))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source="default") -> dict:
    """Load a config file (or "default" / a dict), validate it and fill in defaults."""
    if isinstance(source, dict):
        doc = source
    elif str(source) == "default":
        doc = {}
    else:
        try:
            with open(source, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {source}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{source}: not valid JSON ({err})") from err
        except OSError as err:
            raise ConfigError(f"cannot read config {source}: {err}") from err
    validate(doc)
    cfg = _merge(DEFAULT_CONFIG, doc)
    eps = cfg["experiment"]["eps_grid"]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigError("$.experiment.eps_grid: must be strictly decreasing")
    return cfg


def build_flux(section: dict) -> FluxModel:
    kind = section.get("kind", "burgers")
    if kind == "burgers":
        return FluxModel.burgers()
    if kind == "linear":
        return FluxModel.linear(section.get("speed", 1.0))
    if "coefficients" not in section:
        raise ConfigError("$.flux.coefficients: required for a polynomial flux")
    return FluxModel.polynomial(section["coefficients"])


def build_setup(cfg: dict) -> Setup:
    try:
        grid = TorusGrid(cfg["grid"]["n_cells"])
        flux = build_flux(cfg["flux"])
        noise = NoiseModel(**cfg["noise"])
        scale = DeviationScale(**cfg["scale"])
        solver = SolverConfig(**cfg["solver"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return Setup(grid, flux, noise, solver, scale)


__all__ = ["DEFAULT_CONFIG", "ConfigError", "schema", "validate", "load_config", "build_flux",
           "build_setup"]
