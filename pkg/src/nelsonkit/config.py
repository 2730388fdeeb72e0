"""Config files: schema, validation, loading, and hashing.

A run is described by one JSON document; the CLI layers key=value overrides
on top and hashes the result, so identical configs (plus seed) always map
to identical artifacts and cache entries.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import jsonschema

from .errors import ConfigError
from .model import CouplingSpec, ModelSpec, OneBodyDispersion, ParticleDispersion
from .fock import MomentumGrid

__all__ = ["CONFIG_SCHEMA", "load_config", "config_hash", "build_model",
           "build_grid", "apply_override"]


CONFIG_SCHEMA = {
    "type": "object",
    "required": ["nu", "omega", "Omega", "coupling", "grid"],
    "additionalProperties": False,
    "properties": {
        "nu": {"enum": [1, 2]},
        "omega": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["relativistic", "constant"]},
                "m": {"type": "number", "exclusiveMinimum": 0},
                "c0": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "Omega": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["nonrelativistic", "relativistic",
                                  "polynomial"]},
                "M": {"type": "number", "exclusiveMinimum": 0},
                "coeffs": {"type": "array", "items": {"type": "number"}},
            },
            "additionalProperties": False,
        },
        "coupling": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["nelson", "polaron", "gaussian", "zero"]},
                "lambda": {"type": "number", "minimum": 0},
                "uv_cutoff": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "grid": {
            "type": "object",
            "required": ["half_width", "points_per_axis", "n_max"],
            "properties": {
                "half_width": {"type": "number", "exclusiveMinimum": 0},
                "points_per_axis": {"type": "integer", "minimum": 2},
                "n_max": {"type": "integer", "minimum": 1},
                "dim_cap": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {
                "eig_tol": {"type": "number", "exclusiveMinimum": 0},
                "dense_cutoff": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "xi_grid": {
            "type": "object",
            "required": ["start", "stop", "num"],
            "properties": {
                "start": {"type": "number", "minimum": 0},
                "stop": {"type": "number", "exclusiveMinimum": 0},
                "num": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": False,
        },
        "shells": {
            "type": "object",
            "properties": {
                "n_branches": {"type": "integer", "minimum": 1},
                "gap_tol": {"type": ["number", "null"]},
                "cross_tol": {"type": ["number", "null"]},
            },
            "additionalProperties": False,
        },
        "thresholds": {
            "type": "object",
            "properties": {
                "newton_tol": {"type": "number", "exclusiveMinimum": 0},
                "dedup_tol": {"type": "number", "exclusiveMinimum": 0},
                "scan_points": {"type": "integer", "minimum": 9},
            },
            "additionalProperties": False,
        },
        "vfield": {
            "type": "object",
            "properties": {
                "xi_radius": {"type": "number", "minimum": 0},
                "energy": {
                    "anyOf": [{"type": "number"},
                              {"enum": ["mid-window"]}],
                },
            },
            "additionalProperties": False,
        },
        "mourre": {
            "type": "object",
            "properties": {
                "lambda_grid": {
                    "anyOf": [
                        {"enum": ["auto"]},
                        {"type": "object",
                         "required": ["start", "stop", "num"],
                         "properties": {
                             "start": {"type": "number"},
                             "stop": {"type": "number"},
                             "num": {"type": "integer", "minimum": 1},
                         },
                         "additionalProperties": False},
                    ]
                },
                "kappa_ladder": {
                    "anyOf": [{"type": "null"},
                              {"type": "array",
                               "items": {"type": "number",
                                         "exclusiveMinimum": 0},
                               "minItems": 1}]
                },
                "xi_radius": {"type": "number", "minimum": 0},
                "dense_cap": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "model_check": {
            "type": "object",
            "properties": {
                "sample_budget": {"type": "integer", "minimum": 100},
                "allow_failed": {"type": "boolean"},
                "box": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
}


DEFAULTS = {
    "solver": {"eig_tol": 1e-9, "dense_cutoff": 1500, "seed": 7},
    "xi_grid": {"start": 0.0, "stop": 1.6, "num": 9},
    "shells": {"n_branches": 1, "gap_tol": None, "cross_tol": None},
    "thresholds": {"newton_tol": 1e-10, "dedup_tol": 1e-8,
                   "scan_points": 193},
    "vfield": {"xi_radius": 0.0, "energy": "mid-window"},
    "mourre": {"lambda_grid": "auto", "kappa_ladder": None,
               "xi_radius": 0.0, "dense_cap": 6000},
    "model_check": {"sample_budget": 400, "allow_failed": False, "box": 8.0},
}


def _merge_defaults(cfg: dict) -> dict:
    out = dict(cfg)
    for key, block in DEFAULTS.items():
        merged = dict(block)
        merged.update(out.get(key, {}))
        out[key] = merged
    return out


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config key '{path}': {e.message}") from None
    return _merge_defaults(cfg)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return validate_config(raw)


def apply_override(cfg: dict, dotted_key: str, value: str) -> dict:
    """Apply a key=value override with a dotted path, JSON-decoding the
    value when possible."""
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    out = json.loads(json.dumps(cfg))  # deep copy
    node = out
    parts = dotted_key.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = parsed
    return validate_config({k: v for k, v in out.items()})


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(cfg: dict) -> ModelSpec:
    om = cfg["omega"]
    if om["kind"] == "relativistic":
        omega = OneBodyDispersion(kind="relativistic", m=om.get("m", 1.0))
    else:
        omega = OneBodyDispersion(kind="constant", c0=om.get("c0", 1.0))
    Om = cfg["Omega"]
    if Om["kind"] == "nonrelativistic":
        Omega = ParticleDispersion(kind="nonrelativistic")
    elif Om["kind"] == "relativistic":
        Omega = ParticleDispersion(kind="relativistic", M=Om.get("M", 1.0))
    else:
        Omega = ParticleDispersion(kind="polynomial",
                                   coeffs=tuple(Om.get("coeffs", (0.0, 1.0))))
    cp = cfg["coupling"]
    coupling = CouplingSpec(kind=cp["kind"], lam=cp.get("lambda", 0.0),
                            uv_cutoff=cp.get("uv_cutoff", cfg["grid"]["half_width"]))
    return ModelSpec(nu=cfg["nu"], omega=omega, Omega=Omega, coupling=coupling)


def build_grid(cfg: dict) -> MomentumGrid:
    g = cfg["grid"]
    return MomentumGrid(nu=cfg["nu"], half_width=g["half_width"],
                        points_per_axis=g["points_per_axis"])
