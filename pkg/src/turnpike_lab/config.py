"""Experiment configuration: strict JSON schema, defaults, fail-fast checks."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import jsonschema
import numpy as np

from .errors import SchemaError, ValidationError

DEFAULT_DT = 0.02
DEFAULT_TOL = 1e-8
DEFAULT_SEED = 0

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_MAT = {"type": "array", "items": _VEC, "minItems": 1}

_PROFILE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["zero", "constant", "sine", "feasible", "values"]},
        "value": _NUM,
        "amplitude": _NUM,
        "mode": {"type": "integer", "minimum": 1},
        "control": _NUM,
        "values": _VEC,
    },
}

_HEAT = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type", "n", "target"],
    "properties": {
        "type": {"const": "heat-1d"},
        "n": {"type": "integer", "minimum": 1},
        "length": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "target": _PROFILE,
        "y0": {"oneOf": [_PROFILE, {"type": "null"}]},
        "support": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "lower": _NUM,
        "upper": _NUM,
        "control_weight": {"type": "number", "exclusiveMinimum": 0},
        "state_weight": {"type": "number", "minimum": 0},
    },
}

_FINITE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type", "A", "B", "target"],
    "properties": {
        "type": {"const": "finite-dim"},
        "A": _MAT,
        "B": _MAT,
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "target": _VEC,
        "y0": {"oneOf": [_VEC, {"type": "null"}]},
        "lower": {"oneOf": [_NUM, _VEC]},
        "upper": {"oneOf": [_NUM, _VEC]},
        "control_weight": {"type": "number", "exclusiveMinimum": 0},
        "state_weight": {"type": "number", "minimum": 0},
    },
}

_SEMILINEAR = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type", "n", "target"],
    "properties": {
        "type": {"const": "semilinear-static"},
        "n": {"type": "integer", "minimum": 1},
        "length": {"type": "number", "exclusiveMinimum": 0},
        "target": _PROFILE,
        "radius": {"type": "number", "exclusiveMinimum": 0},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem"],
    "properties": {
        "problem": {
            "type": "object",
            "required": ["type"],
            "properties": {"type": {"enum": ["heat-1d", "finite-dim", "semilinear-static"]}},
        },
        "horizons": {"type": "array", "items": _NUM},
        "epsilons": {"type": "array", "items": _NUM},
        "epsilon_mode": {"enum": ["relative", "absolute"]},
        "storage": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {"kind": {"enum": ["multiplier", "multiplier-discrete", "half-norm"]}},
        },
        "supply": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {"kind": {"enum": ["shifted-cost", "bilinear"]}},
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "max_iterations": {"type": "integer", "minimum": 1},
                "accelerate": {"type": "boolean"},
                "free_initial": {"type": "boolean"},
                "armijo": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "certification": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"samples": {"type": "integer", "minimum": 1}},
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "instances": {"type": "integer", "minimum": 1},
                "n": {"type": "integer", "minimum": 1},
                "nt": {"type": "integer", "minimum": 1},
                "levels": {"type": "integer", "minimum": 2},
            },
        },
        "output_dir": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
}

_PROBLEM_SCHEMAS = {"heat-1d": _HEAT, "finite-dim": _FINITE, "semilinear-static": _SEMILINEAR}

_DEFAULTS = {
    "epsilons": [0.1],
    "epsilon_mode": "relative",
    "storage": {"kind": "multiplier"},
    "supply": {"kind": "shifted-cost"},
    "solver": {"tolerance": DEFAULT_TOL, "max_iterations": 50000, "accelerate": True, "free_initial": False, "armijo": 1e-4},
    "certification": {"samples": 100},
    "oracle": {"instances": 5, "n": 2, "nt": 5, "levels": 3},
    "output_dir": "results",
    "seed": DEFAULT_SEED,
}

_PROBLEM_DEFAULTS = {
    "heat-1d": {
        "length": 1.0,
        "dt": DEFAULT_DT,
        "y0": {"kind": "sine", "amplitude": 1.0, "mode": 1},
        "lower": -1.0,
        "upper": 1.0,
        "control_weight": 1.0,
        "state_weight": 1.0,
    },
    "finite-dim": {"dt": DEFAULT_DT, "y0": None, "lower": -1.0, "upper": 1.0, "control_weight": 1.0, "state_weight": 1.0},
    "semilinear-static": {"length": 1.0, "radius": 0.1},
}


@dataclass
class ExperimentConfig:
    """Validated experiment description with every default filled in."""

    problem: dict
    horizons: list
    epsilons: list
    epsilon_mode: str
    storage: dict
    supply: dict
    solver: dict
    certification: dict
    oracle: dict
    output_dir: str
    seed: int
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def kind(self) -> str:
        return self.problem["type"]

    @property
    def dynamic(self) -> bool:
        return self.kind != "semilinear-static"

    def to_dict(self) -> dict:
        return {
            "problem": self.problem,
            "horizons": self.horizons,
            "epsilons": self.epsilons,
            "epsilon_mode": self.epsilon_mode,
            "storage": self.storage,
            "supply": self.supply,
            "solver": self.solver,
            "certification": self.certification,
            "oracle": self.oracle,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig(**copy.deepcopy(d), raw=self.raw)


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else ""


def _check(instance, schema, prefix=()):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    path = tuple(prefix) + tuple(err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        raise SchemaError(f"unknown key {extra[0]!r}", _pointer(path + (extra[0],)))
    raise SchemaError(err.message, _pointer(path))


def _merge(defaults: dict, given: Optional[dict]) -> dict:
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given or {}))
    return out


def parse_config(text) -> ExperimentConfig:
    """Parse and validate a JSON experiment document.

    Raises
    ------
    SchemaError
        Malformed JSON, unknown keys or wrong types; carries a JSON pointer.
    ValidationError
        Values that are well-typed but inconsistent (empty horizons, ...).
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg} (line {exc.lineno})", "") from None
    _check(data, SCHEMA)
    kind = data["problem"]["type"]
    _check(data["problem"], _PROBLEM_SCHEMAS[kind], ("problem",))

    problem = _merge(_PROBLEM_DEFAULTS[kind], data["problem"])
    cfg = ExperimentConfig(
        problem=problem,
        horizons=[float(T) for T in data.get("horizons", [])],
        epsilons=[float(e) for e in data.get("epsilons", _DEFAULTS["epsilons"])],
        epsilon_mode=data.get("epsilon_mode", _DEFAULTS["epsilon_mode"]),
        storage=_merge(_DEFAULTS["storage"], data.get("storage")),
        supply=_merge(_DEFAULTS["supply"], data.get("supply")),
        solver=_merge(_DEFAULTS["solver"], data.get("solver")),
        certification=_merge(_DEFAULTS["certification"], data.get("certification")),
        oracle=_merge(_DEFAULTS["oracle"], data.get("oracle")),
        output_dir=data.get("output_dir", _DEFAULTS["output_dir"]),
        seed=int(data.get("seed", _DEFAULTS["seed"])),
        raw=data,
    )
    validate_config(cfg, "horizons" in data)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return parse_config(fh.read())


def _profile_ok(spec, n, name):
    if spec is None:
        return
    if spec["kind"] == "values" and len(spec.get("values", [])) != n:
        raise ValidationError(f"{name} values must have length n={n}", f"problem/{name}")


def validate_config(cfg: ExperimentConfig, horizons_given: bool = True) -> None:
    """Cross-field checks run before any solve."""
    p = cfg.problem
    if cfg.dynamic or horizons_given:
        if not cfg.horizons:
            raise ValidationError("horizons must be nonempty", "horizons")
    if any(not T > 0 for T in cfg.horizons):
        raise ValidationError("horizons must be positive", "horizons")
    if sorted(set(cfg.horizons)) != cfg.horizons:
        raise ValidationError("horizons must be strictly increasing", "horizons")
    if not cfg.epsilons:
        raise ValidationError("epsilons must be nonempty", "epsilons")
    if any(not e > 0 for e in cfg.epsilons):
        raise ValidationError("epsilons must be positive", "epsilons")

    if cfg.kind in ("heat-1d", "semilinear-static"):
        _profile_ok(p["target"], p["n"], "target")
    if cfg.kind == "heat-1d":
        _profile_ok(p.get("y0"), p["n"], "y0")
        if p.get("support") is not None and max(p["support"]) > p["n"]:
            raise ValidationError(f"support indices must lie in 1..{p['n']}", "problem/support")
    if cfg.kind == "finite-dim":
        A, B = np.asarray(p["A"], dtype=float), np.asarray(p["B"], dtype=float)
        n = A.shape[0]
        if A.ndim != 2 or A.shape != (n, n):
            raise ValidationError("A must be square", "problem/A")
        if B.ndim != 2 or B.shape[0] != n:
            raise ValidationError(f"B must have {n} rows", "problem/B")
        if len(p["target"]) != n:
            raise ValidationError(f"target must have length {n}", "problem/target")
        if p.get("y0") is not None and len(p["y0"]) != n:
            raise ValidationError(f"y0 must have length {n}", "problem/y0")
        for key in ("lower", "upper"):
            if np.ndim(p[key]) and len(p[key]) != B.shape[1]:
                raise ValidationError(f"{key} must have length {B.shape[1]}", f"problem/{key}")
    if cfg.kind != "semilinear-static":
        if np.any(np.asarray(p["lower"], dtype=float) > np.asarray(p["upper"], dtype=float)):
            raise ValidationError("lower bound exceeds upper bound", "problem/lower")
        dt = p["dt"]
        for T in cfg.horizons:
            k = T / dt
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                raise ValidationError(f"horizon {T:g} is not a multiple of dt={dt:g}", "horizons")
    if cfg.storage["kind"] == "half-norm" and cfg.supply["kind"] != "bilinear":
        raise ValidationError("half-norm storage pairs with the bilinear supply rate", "storage/kind")
