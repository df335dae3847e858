"""Run configuration: JSON parsing, schema validation, defaults and overrides."""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping, Optional

import jsonschema
from referencing import Registry, Resource

from .cone_space import DomainBox
from .energy import EnergyParams
from .errors import RangeError, SchemaError, ValidationError
from .inverse import InsertionConfig, SolverConfig

COMMANDS = ("dist", "energy", "simulate", "lift", "solve", "check-extremal")
ENV_PREFIX = "WFR_"

DEFAULTS = {
    "out": "out",
    "seed": 0,
    "threads": 1,
    "inputs": {},
    "dist": {"resample": False},
    "simulate": {"steps": None, "test_functions": 10},
    "lift": {"epsilon": 1e-3, "samples_per_axis": None, "steps": None, "grid": None, "kernel_width": 1.5},
    "solver": {
        "max_iters": 20,
        "tol": 1e-3,
        "sliding": True,
        "sliding_iters": 300,
        "lattice": None,
        "time_steps": 20,
        "n_levels": 6,
        "level_ratio": 0.6,
        "stencil_radius": 2,
        "refine": True,
        "refine_iters": 200,
        "restarts": 2,
    },
    "check": {"energy_tol": 1e-6, "cap": 1e8},
}

# sections that subcommands cannot run without
REQUIRED = {
    "energy": ("energy", "inputs.curve"),
    "check-extremal": ("energy", "inputs.curve"),
    "dist": ("inputs.curve", "inputs.curve_b"),
    "simulate": ("inputs.fields",),
    "lift": (),
    "solve": ("domain", "energy", "observation"),
}


# -- schemas --------------------------------------------------------------------


@lru_cache(maxsize=None)
def _registry() -> Registry:
    reg = Registry()
    for name in schema_names():
        schema = load_schema(name)
        reg = reg.with_resource(schema["$id"], Resource.from_contents(schema))
    return reg


def schema_names() -> list:
    files = resources.files(__package__).joinpath("schemas")
    return sorted(p.name[: -len(".schema.json")] for p in files.iterdir() if p.name.endswith(".schema.json"))


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files(__package__).joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def _dotted(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def validate_document(obj: Any, name: str) -> None:
    """Validate ``obj`` against the shipped schema ``name``; raise :class:`SchemaError`."""
    validator = jsonschema.Draft202012Validator(load_schema(name), registry=_registry())
    error = jsonschema.exceptions.best_match(validator.iter_errors(obj))
    if error is not None:
        raise SchemaError(_dotted(error.absolute_path), error.message)


# -- overrides --------------------------------------------------------------------


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    """``WFR_SOLVER__MAX_ITERS=5`` becomes ``{"solver": {"max_iters": 5}}``."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX) or len(key) == len(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _coerce(environ[key])
    return out


def merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


# -- config -------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with every default made explicit."""

    command: Optional[str]
    out: str
    seed: int
    threads: int
    domain: Optional[DomainBox]
    energy: Optional[EnergyParams]
    inputs: dict
    dist: dict
    simulate: dict
    lift: dict
    observation: Optional[dict]
    truth: Optional[dict]
    solver: dict
    check: dict
    base_dir: str = field(default=".", compare=False)

    def to_json(self) -> dict:
        out = {
            "out": self.out,
            "seed": self.seed,
            "threads": self.threads,
            "inputs": dict(self.inputs),
            "dist": dict(self.dist),
            "simulate": dict(self.simulate),
            "lift": dict(self.lift),
            "solver": copy.deepcopy(self.solver),
            "check": dict(self.check),
        }
        if self.command is not None:
            out["command"] = self.command
        if self.domain is not None:
            out["domain"] = self.domain.to_json()
        if self.energy is not None:
            out["energy"] = self.energy.to_json()
        if self.observation is not None:
            out["observation"] = copy.deepcopy(self.observation)
        if self.truth is not None:
            out["truth"] = copy.deepcopy(self.truth)
        return out

    def path(self, key: str) -> str:
        """Input path ``inputs.key`` resolved against the config's directory."""
        value = self.inputs.get(key)
        if value is None:
            raise SchemaError(f"inputs.{key}", "required for this command")
        return value if os.path.isabs(value) else os.path.join(self.base_dir, value)

    def solver_config(self) -> SolverConfig:
        s = self.solver
        lattice = s["lattice"]
        if lattice is None:
            dim = self.domain.dim if self.domain is not None else 2
            lattice = [15] * dim
        ins = InsertionConfig(
            lattice=tuple(lattice),
            time_steps=s["time_steps"],
            n_levels=s["n_levels"],
            level_ratio=s["level_ratio"],
            stencil_radius=s["stencil_radius"],
            refine=s["refine"],
            refine_iters=s["refine_iters"],
            restarts=s["restarts"],
        )
        return SolverConfig(
            max_iters=s["max_iters"],
            tol=s["tol"],
            seed=self.seed,
            sliding=s["sliding"],
            sliding_iters=s["sliding_iters"],
            insertion=ins,
        )


def _check_ranges(obj: dict) -> None:
    eps = obj["lift"]["epsilon"]
    if not (math.isfinite(eps) and eps > 0):
        raise RangeError("lift.epsilon", f"must be finite and > 0, got {eps!r}")
    obs = obj.get("observation")
    if obs is not None:
        if not (obs["kernel_width"] > 0):
            raise RangeError("observation.kernel_width", "must be > 0")
        t = obs["times"]
        if any(b <= a for a, b in zip(t, t[1:])) or t[0] < 0 or t[-1] > 1:
            raise RangeError("observation.times", "must be strictly increasing in [0, 1]")
        if obs.get("detectors") is None and obs.get("detectors_per_axis") is None:
            raise SchemaError("observation", "one of detectors, detectors_per_axis is required")
        if obs.get("detectors") is not None and len(obs["detectors"]) != len(t):
            raise SchemaError("observation.detectors", "one detector list per time is required")
    if obj.get("command") == "lift" and not ({"fields", "ensemble"} & set(obj["inputs"])):
        raise SchemaError("inputs", "lift needs inputs.fields or inputs.ensemble")
    if obj["lift"]["kernel_width"] < 1:
        raise RangeError("lift.kernel_width", "must be at least one cell")
    lattice = obj["solver"]["lattice"]
    if lattice is not None and "domain" in obj and len(lattice) != len(obj["domain"]["lower"]):
        raise RangeError("solver.lattice", "length must equal the domain dimension")


def build_config(obj: Mapping, base_dir: str = ".", command: Optional[str] = None) -> RunConfig:
    """Validate a config mapping and fill defaults."""
    if not isinstance(obj, Mapping):
        raise SchemaError("<root>", "config must be a JSON object")
    obj = dict(obj)
    if command is not None:
        obj["command"] = command
    validate_document(obj, "config")
    full = merge(DEFAULTS, obj)
    _check_ranges(full)
    try:
        domain = DomainBox.from_json(full["domain"]) if "domain" in full else None
    except ValidationError as exc:
        raise RangeError("domain", str(exc)) from None
    energy = EnergyParams.from_json(full["energy"]) if "energy" in full else None
    cmd = full.get("command")
    for req in REQUIRED.get(cmd, ()):
        section, _, key = req.partition(".")
        present = full.get(section) if not key else full.get(section, {}).get(key)
        if present is None:
            raise SchemaError(req, f"required for command {cmd!r}")
    return RunConfig(
        command=cmd,
        out=full["out"],
        seed=int(full["seed"]),
        threads=int(full["threads"]),
        domain=domain,
        energy=energy,
        inputs=dict(full["inputs"]),
        dist=full["dist"],
        simulate=full["simulate"],
        lift=full["lift"],
        observation=full.get("observation"),
        truth=full.get("truth"),
        solver=full["solver"],
        check=full["check"],
        base_dir=base_dir,
    )


def parse_config(text: str, base_dir: str = ".", environ: Optional[Mapping[str, str]] = None,
                 command: Optional[str] = None) -> RunConfig:
    """Parse UTF-8 JSON text, apply ``WFR_*`` overrides from ``environ`` and validate.

    Overrides are read only when ``environ`` is given explicitly.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        obj = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise SchemaError("<root>", f"invalid JSON: {exc}") from None
    if environ is not None:
        if not isinstance(obj, dict):
            raise SchemaError("<root>", "config must be a JSON object")
        obj = merge(obj, env_overrides(environ))
    return build_config(obj, base_dir, command)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_json(), sort_keys=True, indent=2)
