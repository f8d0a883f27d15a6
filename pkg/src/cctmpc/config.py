"""Problem files, template and synthesis artifacts, and their JSON encoding.

Every JSON file written here prints floats with 17 significant digits, which
is enough to reproduce each IEEE double exactly, so ``load -> dump`` is byte
identical.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .cost import StageCost, stage_cost_form
from .geometry import (Template, VertexConfiguration, build_template_2d,
                       enumerate_vertex_configuration, grid_template_3d,
                       regular_polygon_angles, vertex_maps)
from .simulate import DISTURBANCE_MODES, MODEL_MODES, ScenarioConfig
from .solver import SolverSettings
from .synthesis import SynthesisData
from .system import UncertainSystem


class SchemaError(ValueError):
    """A problem file or artifact is malformed or dimensionally inconsistent."""


# ---------------------------------------------------------------------------
# JSON encoding


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot encode non-finite float {x!r}")
    s = format(x, ".17g")
    if "e" not in s and "." not in s:
        s += ".0"   # keep floats distinguishable from integers
    return s


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _encode(obj, indent: int, level: int) -> str:
    obj = _plain(obj)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        vals = [_plain(v) for v in obj]
        if all(not isinstance(v, (dict, list, tuple)) for v in vals):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in vals) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in vals) + "\n" + end + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON text with 17-significant-digit floats and scalar lists kept on one line."""
    return _encode(obj, indent, 0) + "\n"


def dump(obj, path) -> None:
    Path(path).write_text(dumps(obj))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc


def _validate(data, schema, what: str) -> None:
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{what}: {where}: {exc.message}") from exc


# ---------------------------------------------------------------------------
# Schemas

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM}
_MAT = {"type": "array", "items": _VEC}
_WEIGHT = {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, _MAT]}
_POLY = {
    "type": "object",
    "required": ["H", "h"],
    "properties": {"H": {"type": "array", "items": _VEC}, "h": _VEC},
    "additionalProperties": False,
}

SYSTEM_SCHEMA = {
    "type": "object",
    "required": ["A_vertices", "B_vertices", "C", "W", "X", "U"],
    "properties": {
        "A_vertices": {"oneOf": [_MAT, {"type": "array", "minItems": 1, "items": _MAT}]},
        "B_vertices": {"oneOf": [_MAT, {"type": "array", "minItems": 1, "items": _MAT}]},
        "C": _MAT,
        "W": _POLY,
        "X": _POLY,
        "U": _POLY,
    },
    "additionalProperties": False,
}

TEMPLATE_RECIPE_SCHEMA = {
    "oneOf": [
        {"type": "object", "required": ["kind", "Y", "sigma"],
         "properties": {"kind": {"const": "explicit"}, "Y": _MAT, "sigma": _VEC},
         "additionalProperties": False},
        {"type": "object", "required": ["kind", "angles"],
         "properties": {"kind": {"const": "angles"}, "angles": _VEC},
         "additionalProperties": False},
        {"type": "object", "required": ["kind", "m"],
         "properties": {"kind": {"const": "regular"}, "m": {"type": "integer", "minimum": 3}},
         "additionalProperties": False},
        {"type": "object", "required": ["kind"],
         "properties": {"kind": {"const": "grid3d"}, "radius": {"type": "integer", "minimum": 1}},
         "additionalProperties": False},
    ]
}

PROBLEM_SCHEMA = {
    "type": "object",
    "required": ["template"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "system": SYSTEM_SCHEMA,
        "template": TEMPLATE_RECIPE_SCHEMA,
        "perturb": {"type": "boolean"},
        "cost": {"oneOf": [
            {"type": "object", "required": ["kind", "Q", "R", "S", "T"],
             "properties": {"kind": {"const": "weights"}, "Q": _WEIGHT, "R": _WEIGHT,
                            "S": _WEIGHT, "T": _WEIGHT},
             "additionalProperties": False},
            {"type": "object", "required": ["kind"],
             "properties": {"kind": {"const": "parameter_norm"}},
             "additionalProperties": False},
        ]},
        "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "horizon": {"type": "integer", "minimum": 1},
        "steady_fallback": {"type": "boolean"},
        "solver": {
            "type": "object",
            "properties": {
                "feas_tol": {"type": "number", "exclusiveMinimum": 0},
                "stat_tol": {"type": "number", "exclusiveMinimum": 0},
                "comp_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "backend": {"enum": ["reference", "highs"]},
                "polish": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "scenario": {
            "type": "object",
            "required": ["x0"],
            "properties": {
                "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
                "steps": {"type": "integer", "minimum": 1},
                "x0": _VEC,
                "disturbance": {"enum": list(DISTURBANCE_MODES)},
                "model": {"enum": list(MODEL_MODES)},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

TEMPLATE_SCHEMA = {
    "type": "object",
    "required": ["Y", "sigma", "config_sigma", "vertex_sets", "E", "E_raw", "info"],
    "properties": {
        "Y": _MAT,
        "sigma": _VEC,
        "config_sigma": _VEC,
        "vertex_sets": {"type": "array", "minItems": 1,
                        "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "E": _MAT,
        "E_raw": _MAT,
        "info": {"type": "object"},
    },
    "additionalProperties": False,
}

SYNTH_SCHEMA = {
    "type": "object",
    "required": ["sigma", "beta", "y_s", "u_s", "lambda", "V_s", "u_sigma", "gamma",
                 "ell_bar", "rho"],
    "properties": {
        "sigma": _VEC,
        "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "y_s": _VEC,
        "u_s": _MAT,
        "lambda": _VEC,
        "V_s": _NUM,
        "u_sigma": _MAT,
        "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "ell_bar": {"type": "number", "minimum": 0},
        "rho": {"type": "number", "minimum": 0},
        "anchored": {"type": "boolean"},
        "sigma_simple": {"type": "boolean"},
        "steady_terminal": {"type": "boolean"},
    },
    "additionalProperties": False,
}


# ---------------------------------------------------------------------------
# Problem files


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A validated problem file.  Only ``template`` is mandatory."""

    template: dict
    system: UncertainSystem | None = None
    perturb: bool = False
    cost: dict | None = None
    beta: float = 0.95
    horizon: int = 10
    steady_fallback: bool = False
    settings: SolverSettings = field(default_factory=SolverSettings)
    scenario: dict | None = None
    name: str = ""

    @property
    def state_dim(self) -> int:
        kind = self.template["kind"]
        if kind in ("angles", "regular"):
            return 2
        if kind == "grid3d":
            return 3
        return len(self.template["Y"][0])

    def require_system(self) -> UncertainSystem:
        if self.system is None:
            raise SchemaError(f"problem {self.name or '<unnamed>'} has no system")
        return self.system

    def require_cost(self) -> dict:
        if self.cost is None:
            raise SchemaError(f"problem {self.name or '<unnamed>'} has no cost")
        return self.cost

    def scenario_config(self, seed=None, steps=None, x0=None, disturbance=None,
                        model=None) -> ScenarioConfig:
        sc = dict(self.scenario or {})
        x0 = sc.get("x0") if x0 is None else x0
        if x0 is None:
            raise SchemaError("no initial state given")
        if len(x0) != self.state_dim:
            raise SchemaError(f"initial state has {len(x0)} entries, expected {self.state_dim}")
        return ScenarioConfig(
            seed=int(sc.get("seed", 0) if seed is None else seed),
            steps=int(sc.get("steps", 30) if steps is None else steps),
            x0=tuple(x0),
            disturbance=disturbance or sc.get("disturbance", "box-uniform"),
            model=model or sc.get("model", "fixed-vertex"),
        )


def _shape(v) -> tuple:
    return np.asarray(v, dtype=float).shape


def _check_weight(w, dim: int, name: str) -> None:
    if isinstance(w, (int, float)):
        return
    if _shape(w) != (dim, dim):
        raise SchemaError(f"cost/{name}: expected {dim}x{dim}, got {_shape(w)}")


def _check_dimensions(data: dict) -> None:
    """Shape consistency that a JSON schema cannot express."""
    t = data["template"]
    if t["kind"] == "explicit":
        rows = {len(r) for r in t["Y"]}
        if len(rows) != 1 or rows == {0}:
            raise SchemaError("template/Y: rows must be nonempty and of equal length")
        if len(t["sigma"]) != len(t["Y"]):
            raise SchemaError(f"template/sigma: {len(t['sigma'])} entries for {len(t['Y'])} rows")
        n = rows.pop()
    else:
        n = 3 if t["kind"] == "grid3d" else 2
    sysd = data.get("system")
    nu = None
    if sysd is not None:
        try:
            A = np.asarray(sysd["A_vertices"], dtype=float)
            B = np.asarray(sysd["B_vertices"], dtype=float)
            C = np.asarray(sysd["C"], dtype=float)
        except ValueError as exc:
            raise SchemaError(f"system: ragged matrix: {exc}") from exc
        A = A[None] if A.ndim == 2 else A
        B = B[None] if B.ndim == 2 else B
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise SchemaError(f"system/A_vertices: expected square matrices, got {A.shape}")
        nx = A.shape[1]
        if B.ndim != 3 or B.shape[0] != A.shape[0] or B.shape[1] != nx:
            raise SchemaError(f"system/B_vertices: shape {B.shape} does not match A {A.shape}")
        nu = B.shape[2]
        if C.ndim != 2 or C.shape[0] != nx:
            raise SchemaError(f"system/C: expected {nx} rows, got shape {C.shape}")
        for key, dim in (("W", C.shape[1]), ("X", nx), ("U", nu)):
            P = sysd[key]
            if len(P["H"]) != len(P["h"]):
                raise SchemaError(f"system/{key}: {len(P['H'])} rows in H, {len(P['h'])} in h")
            if any(len(r) != dim for r in P["H"]):
                raise SchemaError(f"system/{key}/H: rows must have {dim} columns")
        if nx != n:
            raise SchemaError(f"template dimension {n} differs from state dimension {nx}")
    cost = data.get("cost")
    if cost is not None and cost["kind"] == "weights":
        _check_weight(cost["Q"], n, "Q")
        _check_weight(cost["S"], n, "S")
        if nu is not None:
            _check_weight(cost["R"], nu, "R")
            _check_weight(cost["T"], nu, "T")
    sc = data.get("scenario")
    if sc is not None and len(sc["x0"]) != n:
        raise SchemaError(f"scenario/x0: {len(sc['x0'])} entries, expected {n}")


def parse_problem(data: dict) -> ProblemSpec:
    _validate(data, PROBLEM_SCHEMA, "problem")
    _check_dimensions(data)
    system = UncertainSystem.from_json(data["system"]) if "system" in data else None
    return ProblemSpec(
        template=data["template"],
        system=system,
        perturb=bool(data.get("perturb", False)),
        cost=data.get("cost"),
        beta=float(data.get("beta", 0.95)),
        horizon=int(data.get("horizon", 10)),
        steady_fallback=bool(data.get("steady_fallback", False)),
        settings=SolverSettings(**data.get("solver", {})),
        scenario=data.get("scenario"),
        name=data.get("name", ""),
    )


def load_problem(path) -> ProblemSpec:
    return parse_problem(_read_json(path))


# ---------------------------------------------------------------------------
# Building blocks from a problem


def seed_template(spec: ProblemSpec) -> Template:
    """The template at its recipe seed, before any vertex enumeration."""
    t = spec.template
    kind = t["kind"]
    if kind == "regular":
        return build_template_2d(regular_polygon_angles(int(t["m"])))[0]
    if kind == "angles":
        return build_template_2d(t["angles"])[0]
    if kind == "grid3d":
        return grid_template_3d(int(t.get("radius", 1)))
    return Template(np.asarray(t["Y"], dtype=float), np.asarray(t["sigma"], dtype=float))


def build_template(spec: ProblemSpec) -> tuple[Template, VertexConfiguration]:
    """Template and vertex configuration from the problem's recipe."""
    t = spec.template
    kind = t["kind"]
    if kind == "regular":
        return build_template_2d(regular_polygon_angles(int(t["m"])))
    if kind == "angles":
        return build_template_2d(t["angles"])
    template = seed_template(spec)
    return template, enumerate_vertex_configuration(template, spec.settings, perturb=spec.perturb)


def build_cost(spec: ProblemSpec, vc: VertexConfiguration, nu: int) -> StageCost:
    cost = spec.require_cost()
    if cost["kind"] == "parameter_norm":
        return StageCost.parameter_norm(vc.m, vc.mbar, nu)
    return stage_cost_form(cost["Q"], cost["R"], cost["S"], cost["T"], vc, nu)


# ---------------------------------------------------------------------------
# Template and synthesis artifacts


def template_to_json(template: Template, vc: VertexConfiguration) -> dict:
    return {
        "Y": template.Y,
        "sigma": template.sigma,
        "config_sigma": vc.sigma,
        "vertex_sets": [list(s) for s in vc.vertex_sets],
        "E": vc.E,
        "E_raw": vc.E_raw,
        "info": {k: _plain(v) for k, v in vc.info.items()},
    }


def template_from_json(data: dict) -> tuple[Template, VertexConfiguration]:
    _validate(data, TEMPLATE_SCHEMA, "template")
    Y = np.asarray(data["Y"], dtype=float)
    if Y.ndim != 2:
        raise SchemaError("template/Y: not a matrix")
    m, _ = Y.shape
    E = np.asarray(data["E"], dtype=float).reshape(-1, m)
    E_raw = np.asarray(data["E_raw"], dtype=float).reshape(-1, m)
    sets = tuple(tuple(int(i) for i in s) for s in data["vertex_sets"])
    if any(i >= m for s in sets for i in s):
        raise SchemaError("template/vertex_sets: facet index out of range")
    try:
        template = Template(Y, data["sigma"])
        maps = vertex_maps(Y, sets)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SchemaError(f"template: {exc}") from exc
    vc = VertexConfiguration(sets, maps, E_raw, E, np.asarray(data["config_sigma"], dtype=float),
                             dict(data["info"]))
    return template, vc


def load_template(path) -> tuple[Template, VertexConfiguration]:
    return template_from_json(_read_json(path))


def synth_from_json(data: dict) -> SynthesisData:
    _validate(data, SYNTH_SCHEMA, "synthesis")
    sd = SynthesisData.from_json(data)
    m = sd.sigma.size
    if sd.y_s.size != m or sd.lam.size != m:
        raise SchemaError("synthesis: sigma, y_s and lambda must have equal length")
    return sd


def load_synth(path) -> SynthesisData:
    return synth_from_json(_read_json(path))
