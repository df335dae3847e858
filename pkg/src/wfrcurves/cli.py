"""Command-line interface: ``wfrcurves <command> --config cfg.json --out dir``.

Exit codes: 0 success, 1 validation failure (including a failed
``check-extremal``), 2 runtime failure.  Every run writes ``provenance.json``
to the output directory; failures also write ``error.json`` and print it to
stderr.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata
from typing import Optional, Sequence

import numpy as np

from . import io as wio
from .characteristics import integrate_many, ode_residual, vanishing_time
from .cone_space import sup_distance
from .config import COMMANDS, RunConfig, parse_config
from .energy import coercivity_bounds, energy_terms, fisher_information, mass_integral
from .errors import RangeError, SchemaError, ValidationError, WFRError
from .inverse import ObservationModel, extremality_check, gcg_solve, observe
from .superposition import (
    CurveEnsemble,
    continuity_residuals,
    default_test_functions,
    grid_solution_from_ensemble,
    lift,
    superpose,
)

log = logging.getLogger("wfrcurves")


class _Run:
    def __init__(self, cfg: RunConfig, out: str):
        self.cfg = cfg
        self.out = out
        self.outputs: list = []

    def json(self, name: str, obj, schema: Optional[str] = None):
        wio.write_json(os.path.join(self.out, name), obj, schema)
        self.outputs.append(name)

    def text(self, name: str, text: str):
        wio.write_text(os.path.join(self.out, name), text)
        self.outputs.append(name)


# -- commands -------------------------------------------------------------------


def cmd_dist(run: _Run) -> int:
    cfg = run.cfg
    a = wio.load_curve(cfg.path("curve"))
    b = wio.load_curve(cfg.path("curve_b"))
    d = sup_distance(a, b, resample_grids=cfg.dist["resample"])
    run.json("dist.json", {"command": "dist", "sup_distance": d, "resampled": cfg.dist["resample"]}, "report")
    print(repr(d))
    return 0


def cmd_energy(run: _Run) -> int:
    cfg = run.cfg
    c = wio.load_curve(cfg.path("curve"))
    terms = energy_terms(c, cfg.energy)
    total = terms["kinetic"] + terms["growth"] + terms["mass"]
    report = {
        "command": "energy",
        "energy": total,
        "terms": terms,
        "mass_integral": mass_integral(c),
        "fisher_information": fisher_information(c),
        "coercivity": coercivity_bounds(c, cfg.energy).to_json(),
        "vanishing_time": vanishing_time(c),
    }
    run.json("energy.json", report, "report")
    print(repr(total))
    return 0


def cmd_simulate(run: _Run) -> int:
    cfg = run.cfg
    fg = wio.load_fieldgrid(cfg.path("fields"))
    steps = cfg.simulate["steps"] or fg.M
    if "initial" in cfg.inputs:
        X0, r0 = wio.load_initial(cfg.path("initial"), fg.dim)
        coef = np.ones(r0.size)
    elif "ensemble" in cfg.inputs:
        e0 = wio.load_ensemble(cfg.path("ensemble"))
        starts = [curve.at(0.0) for curve in e0.curves]
        X0 = np.array([x for _, x in starts]).reshape(-1, fg.dim)
        r0 = np.array([h for h, _ in starts])
        coef = e0.coefficients
    else:
        raise SchemaError("inputs", "simulate needs inputs.initial or inputs.ensemble")
    traj = integrate_many(fg, X0, r0, steps, workers=cfg.threads)
    ens = CurveEnsemble(tuple((float(c), traj.curve(i)) for i, c in enumerate(coef)), traj.times)
    tests = default_test_functions(fg.box, cfg.simulate["test_functions"], seed=cfg.seed)
    res = continuity_residuals(ens, fg, tests)
    odes = [ode_residual(curve, fg) for curve in ens.curves]
    report = {
        "command": "simulate",
        "steps": steps,
        "n_atoms": len(ens),
        "continuity_residuals": res.tolist(),
        "continuity_residual_max": float(np.max(np.abs(res))) if res.size else 0.0,
        "ode_position_residual_max": max((o.pos_residual for o in odes), default=0.0),
        "ode_mass_residual_max": max((o.mass_residual for o in odes), default=0.0),
        "vanishing_times": [vanishing_time(curve) for curve in ens.curves],
    }
    run.json("ensemble.json", ens.to_json(), "ensemble")
    run.text("slices.csv", wio.slices_csv([superpose(ens, t) for t in ens.times], fg.dim))
    run.json("residual.json", report, "report")
    return 0


def _lift_input(cfg: RunConfig):
    if "fields" in cfg.inputs:
        fg = wio.load_fieldgrid(cfg.path("fields"))
        if fg.rho is None:
            raise ValidationError("lift needs a field grid with a density rho")
        return fg
    if cfg.domain is None:
        raise SchemaError("domain", "required to rasterise an ensemble")
    e = wio.load_ensemble(cfg.path("ensemble"))
    grid = cfg.lift["grid"] or [32] * cfg.domain.dim
    if len(grid) != cfg.domain.dim:
        raise RangeError("lift.grid", "length must equal the domain dimension")
    return grid_solution_from_ensemble(e, cfg.domain, grid, cfg.lift["kernel_width"])


def cmd_lift(run: _Run) -> int:
    cfg = run.cfg
    fg = _lift_input(cfg)
    res = lift(fg, cfg.lift["epsilon"], cfg.lift["samples_per_axis"], cfg.lift["steps"], workers=cfg.threads)
    run.json("ensemble.json", res.ensemble.to_json(), "ensemble")
    run.json("lift_report.json", dict(res.report, command="lift"), "report")
    return 0


def _observation_model(cfg: RunConfig) -> ObservationModel:
    obs = cfg.observation
    if obs.get("detectors") is not None:
        om = ObservationModel(obs["times"], tuple(np.asarray(p, dtype=float) for p in obs["detectors"]),
                              obs["kernel_width"])
    else:
        om = ObservationModel.on_grid(cfg.domain, obs["times"], obs["detectors_per_axis"], obs["kernel_width"])
    for i, p in enumerate(om.detectors):
        if p.shape[1] != cfg.domain.dim:
            raise SchemaError(f"observation.detectors.{i}", "dimension does not match the domain")
    if "data" in cfg.inputs:
        y = wio.load_data(cfg.path("data"), [p.shape[0] for p in om.detectors])
        return om.with_data(np.concatenate(y))
    if cfg.truth is not None:
        wio.validate_document({"times": None, **cfg.truth}, "ensemble")
        truth = CurveEnsemble.from_json({"times": None, **cfg.truth})
        return om.with_data(observe(truth, om))
    raise SchemaError("inputs.data", "solve needs inputs.data or a truth block")


def cmd_solve(run: _Run) -> int:
    cfg = run.cfg
    om = _observation_model(cfg)
    sol = gcg_solve(om, cfg.energy, cfg.domain, cfg.solver_config())
    run.json("solution.json", sol.to_json(), "solution")
    rows = []
    for k, obj in enumerate(sol.objective_trace):
        cert = sol.certificate_trace[k] if k < len(sol.certificate_trace) else float("nan")
        rows.append([k, float(obj), float(cert)])
    run.text("trace.csv", wio.table_csv(["iteration", "objective", "certificate"], rows))
    run.text("trajectories.csv", wio.trajectories_csv(sol.ensemble))
    print(json.dumps({"atoms": len(sol.ensemble), "residual_norm": sol.residual_norm, "data_norm": sol.data_norm}))
    return 0


def cmd_check_extremal(run: _Run) -> int:
    cfg = run.cfg
    c = wio.load_curve(cfg.path("curve"))
    rep = extremality_check(c, cfg.energy, cfg.check["energy_tol"], cfg.check["cap"])
    run.json("extremality.json", dict(rep.to_json(), command="check-extremal"), "report")
    print("ok" if rep.ok else "not extremal")
    return 0 if rep.ok else 1


HANDLERS = {
    "dist": cmd_dist,
    "energy": cmd_energy,
    "simulate": cmd_simulate,
    "lift": cmd_lift,
    "solve": cmd_solve,
    "check-extremal": cmd_check_extremal,
}


# -- entry point --------------------------------------------------------------------


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wfrcurves", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--threads", type=int, help="worker threads for parallel sections")
        p.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    return parser


def _fail(exc: BaseException, code: int, out: Optional[str]) -> dict:
    err = {
        "error": True,
        "type": type(exc).__name__,
        "message": str(exc),
        "path": getattr(exc, "path", None) or getattr(exc, "field", None),
        "exit_code": code,
    }
    print(wio.dumps(err), file=sys.stderr, end="")
    if out is not None and os.path.isdir(out):
        wio.write_json(os.path.join(out, "error.json"), err, "error")
    return err


def main(argv: Optional[Sequence[str]] = None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    environ = os.environ if environ is None else environ
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    out = None
    run = None
    try:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}") from None
        cfg = parse_config(text, os.path.dirname(os.path.abspath(args.config)), environ, args.command)
        cli = {k: v for k, v in (("out", args.out), ("threads", args.threads), ("seed", args.seed)) if v is not None}
        if cli:
            obj = cfg.to_json()
            obj.update(cli)
            cfg = parse_config(json.dumps(obj), cfg.base_dir, None, args.command)
        out = cfg.out if os.path.isabs(cfg.out) or args.out else os.path.join(cfg.base_dir, cfg.out)
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory: {exc}") from None
        run = _Run(cfg, out)
        code = HANDLERS[args.command](run)
    except ValidationError as exc:
        code = 1
        if out is None and args.out:
            os.makedirs(args.out, exist_ok=True)
            out = args.out
        _fail(exc, code, out)
    except (WFRError, ArithmeticError, OSError, RuntimeError, ValueError) as exc:
        code = 2
        _fail(exc, code, out)
    if run is not None:
        prov = {
            "command": args.command,
            "config": run.cfg.to_json(),
            "versions": _versions(),
            "seed": run.cfg.seed,
            "threads": run.cfg.threads,
            "wall_time": time.perf_counter() - t0,
            "started": started,
            "exit_code": code,
            "outputs": run.outputs,
        }
        wio.write_json(os.path.join(out, "provenance.json"), prov, "provenance")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
