"""Configuration parsing, experiment presets, and file outputs.

Configs are JSON documents validated against a closed schema (unknown keys
are rejected with their path).  Presets ship as data files and expand to
full configs; overrides use dotted paths with JSON-encoded values.

A run directory contains: ``energy.csv`` (per-step diagnostics),
``solver_stats.csv`` (iteration counts and wall times; the only
non-deterministic file), ``snapshots/curves_t{T}.txt`` polyline dumps,
``bulk/w_t{T}.vtk`` legacy-VTK potential fields, ``junctions.txt`` and
``summary.json``.  All numbers are written with %.12g.
"""

from __future__ import annotations

import argparse
import copy
import csv
import importlib.resources
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import simulation
from .bulk_mesh import DOMAIN_AREA

__all__ = ["RunConfig", "parse_config", "serialize_config", "load_preset", "preset_names", "write_outputs", "main"]

_FMT = "%.12g"

_DEFAULTS = {
    "name": "",
    "description": "",
    "geometry": None,
    "anisotropy": {"type": "isotropic", "scale": 1.0},
    "mobility": {"rho": 0.0, "beta": 1.0},
    "boundary": {"dirichlet": "none", "w_D": None},
    "time": {"tau": 1e-3, "T": 1.0},
    "mesh": {"h_fine": 8.0 / 128, "h_coarse": 8.0 / 16, "band_width": 2 * 8.0 / 128},
    "resolution": {"vertices_per_unit_length": 128.0, "vertices_per_curve": None},
    "solver": {"method": "gmres+lsq-precond", "tol": 1e-10, "max_iters": 1000, "restart": 100},
    "surgery": {"min_length": None, "min_vertices": 4},
    "quadrature": "exact",
    "output": {"times": [], "dir": None},
}

_SECTION_KEYS = {
    "geometry": {
        "kind", "areas", "area", "center", "centers", "radius", "disk_center",
        "curves", "junctions", "orientation", "exterior_phase",
    },
    "anisotropy": {"type", "delta", "scale", "matrices"},
    "mobility": {"rho", "beta"},
    "boundary": {"dirichlet", "w_D"},
    "time": {"tau", "T"},
    "mesh": {"h_fine", "h_coarse", "band_width"},
    "resolution": {"vertices_per_unit_length", "vertices_per_curve"},
    "solver": {"method", "tol", "max_iters", "restart"},
    "surgery": {"min_length", "min_vertices"},
    "output": {"times", "dir"},
}


@dataclass
class RunConfig:
    name: str
    description: str
    geometry: dict
    anisotropy: object           # dict or list of dicts (one per curve)
    mobility: dict
    boundary: dict
    time: dict
    mesh: dict
    resolution: dict
    solver: dict
    surgery: dict
    quadrature: str
    output: dict

    def to_dict(self) -> dict:
        return copy.deepcopy(self.__dict__)


class ConfigError(ValueError):
    pass


def _check_keys(section: str, entry: dict, path: str):
    allowed = _SECTION_KEYS[section]
    for k in entry:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}: unknown key")


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON config document into a RunConfig."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    return _validate(raw)


def _validate(raw: dict) -> RunConfig:
    for k in raw:
        if k not in _DEFAULTS:
            raise ConfigError(f"{k}: unknown key")
    cfg = {}
    for key, default in _DEFAULTS.items():
        val = raw.get(key, copy.deepcopy(default))
        if key == "anisotropy" and isinstance(val, list):
            cfg[key] = copy.deepcopy(val)
        elif isinstance(default, dict) and val is not None:
            if not isinstance(val, dict):
                raise ConfigError(f"{key}: expected an object")
            merged = copy.deepcopy(default)
            merged.update(val)
            _check_keys(key, merged, key)
            cfg[key] = merged
        else:
            cfg[key] = copy.deepcopy(val)

    if cfg["geometry"] is None:
        raise ConfigError("geometry: required")
    _check_keys("geometry", cfg["geometry"], "geometry")
    if isinstance(cfg["anisotropy"], list):
        for i, entry in enumerate(cfg["anisotropy"]):
            _check_keys("anisotropy", entry, f"anisotropy[{i}]")
    else:
        _check_keys("anisotropy", cfg["anisotropy"], "anisotropy")

    tau, T = cfg["time"]["tau"], cfg["time"]["T"]
    if not (isinstance(tau, (int, float)) and tau > 0):
        raise ConfigError("time.tau: must be positive")
    if not (isinstance(T, (int, float)) and T >= tau):
        raise ConfigError("time.T: must be at least tau")
    if cfg["mesh"]["h_fine"] > cfg["mesh"]["h_coarse"]:
        raise ConfigError("mesh.h_fine: must not exceed mesh.h_coarse")
    if cfg["quadrature"] not in ("exact", "lumped"):
        raise ConfigError("quadrature: must be 'exact' or 'lumped'")
    if cfg["boundary"]["dirichlet"] not in ("none", "all", "right"):
        raise ConfigError("boundary.dirichlet: must be 'none', 'all' or 'right'")

    w = cfg["boundary"]["w_D"]
    if w is None:
        n_phases = _phase_count(cfg["geometry"])
        w = [0.0] * n_phases
        cfg["boundary"]["w_D"] = w
    if abs(sum(w)) > 1e-12 * max(1.0, max(abs(x) for x in w)):
        raise ConfigError("boundary.w_D: components must sum to zero")
    if cfg["boundary"]["dirichlet"] == "none" and any(x != 0.0 for x in w):
        raise ConfigError("boundary.w_D: must be zero when no Dirichlet boundary is selected")
    return RunConfig(**cfg)


def _phase_count(geometry: dict) -> int:
    if geometry.get("kind") == "polylines":
        return len(geometry["orientation"])
    return 3


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


# -- presets ------------------------------------------------------------------


def preset_names():
    root = importlib.resources.files("msflow").joinpath("presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> RunConfig:
    root = importlib.resources.files("msflow").joinpath("presets")
    path = root.joinpath(f"{name}.json")
    try:
        text = path.read_text()
    except FileNotFoundError as err:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}") from err
    return parse_config(text)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Dotted-path overrides, values parsed as JSON ('time.tau=0.01')."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = path.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = value
    return _validate(data)


# -- outputs ------------------------------------------------------------------


def _fmt(x) -> str:
    return _FMT % float(x)


def _time_tag(t: float) -> str:
    return f"{t:g}"


def write_outputs(result, cfg: RunConfig, outdir) -> dict:
    """Write the deterministic file set plus the timing log; returns paths."""
    out = Path(outdir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    (out / "bulk").mkdir(parents=True, exist_ok=True)

    n_phases = len(result.records[0].areas)
    with open(out / "energy.csv", "w", newline="") as f:
        wtr = csv.writer(f)
        wtr.writerow(
            ["step", "t", "gamma_length", "energy"]
            + [f"area_{l}" for l in range(n_phases)]
            + ["slack", "solver_iterations", "solver_residual"]
        )
        for r in result.records:
            wtr.writerow(
                [r.m, _fmt(r.t), _fmt(r.gamma_length), _fmt(r.energy)]
                + [_fmt(a) for a in r.areas]
                + [_fmt(r.slack), r.iterations, _fmt(r.residual)]
            )

    with open(out / "solver_stats.csv", "w", newline="") as f:
        wtr = csv.writer(f)
        wtr.writerow(["step", "iterations", "residual", "wall_ms"])
        for r in result.records[1:]:
            wtr.writerow([r.m, r.iterations, _fmt(r.residual), _fmt(r.wall_ms)])

    for t, network in sorted(result.snapshots.items()):
        with open(out / "snapshots" / f"curves_t{_time_tag(t)}.txt", "w") as f:
            for i, c in enumerate(network.curves):
                f.write(f"curve {i} closed={1 if c.closed else 0}\n")
                for x, y in c.vertices:
                    f.write(f"{_fmt(x)} {_fmt(y)}\n")

    for t, (mesh, W) in sorted(result.bulk_snapshots.items()):
        _write_vtk(out / "bulk" / f"w_t{_time_tag(t)}.vtk", mesh, W)

    first_net = next(iter(result.snapshots.values()), result.final_state.network)
    with open(out / "junctions.txt", "w") as f:
        for k, jm in enumerate(first_net.junctions):
            for z in range(jm.n_matched):
                trip = " ".join(
                    f"{c} {jm.vertex_lists[r][z]}" for r, c in enumerate(jm.curves)
                )
                f.write(f"{k} {trip}\n")

    final = result.final_state
    final_areas, _ = final.network.region_areas(DOMAIN_AREA)
    summary = {
        "config": cfg.to_dict(),
        "n_steps": final.m,
        "final_time": final.t,
        "final_areas": [float(a) for a in final_areas],
        "final_energy": result.records[-1].energy,
        "final_gamma_length": result.records[-1].gamma_length,
        "extinctions": [
            {"t": t, "curve": label, "area": a} for (t, label, a) in result.extinctions
        ],
        "curves": [
            {"label": c.label, "closed": c.closed, "vertices": c.n_vertices}
            for c in final.network.curves
        ],
        "slack_tolerance": result.slack_tolerance,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)

    return {"out": str(out)}


def _write_vtk(path, mesh, W):
    n, t = mesh.n_vertices, mesh.n_triangles
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("chemical potentials\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {n} double\n")
        for x, y in mesh.vertices:
            f.write(f"{_fmt(x)} {_fmt(y)} 0\n")
        f.write(f"CELLS {t} {4 * t}\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {t}\n")
        f.write("\n".join(["5"] * t) + "\n")
        f.write(f"POINT_DATA {n}\n")
        for l in range(W.shape[1]):
            f.write(f"SCALARS w_{l} double 1\nLOOKUP_TABLE default\n")
            f.write("\n".join(_fmt(v) for v in W[:, l]) + "\n")


# -- verify -------------------------------------------------------------------


def verify_rundir(rundir) -> int:
    """Re-check the stability slack (and energy monotonicity when applicable)
    from a run directory's logged data.  Returns a process exit code."""
    out = Path(rundir)
    with open(out / "summary.json") as f:
        summary = json.load(f)
    tol = summary.get("slack_tolerance", 1e-9)
    w_D = summary["config"]["boundary"]["w_D"]
    rows = []
    with open(out / "energy.csv") as f:
        for row in csv.DictReader(f):
            rows.append(row)
    ok = True
    worst = math.inf
    for row in rows[1:]:
        slack = float(row["slack"])
        ref = max(1.0, float(row["gamma_length"]))
        worst = min(worst, slack / ref)
        if slack < -tol * ref:
            ok = False
    print(f"dissipation slack >= -{tol:g} (relative): {'PASS' if ok else 'FAIL'} "
          f"(worst relative slack {worst:.3e})")
    code = 0 if ok else 1
    if all(v == 0 for v in w_D):
        energies = [float(r["energy"]) for r in rows]
        mono = all(b <= a + tol * max(1.0, abs(a)) for a, b in zip(energies, energies[1:]))
        print(f"energy monotonicity: {'PASS' if mono else 'FAIL'}")
        if not mono:
            code = 1
    return code


# -- CLI ----------------------------------------------------------------------


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="msflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    run_p = sub.add_parser("run", help="execute a simulation")
    run_p.add_argument("config", nargs="?", help="path to a JSON config")
    run_p.add_argument("--preset", help="named preset instead of a config file")
    run_p.add_argument("--out", default=None, help="output directory")
    run_p.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="dotted-path config override, value parsed as JSON",
    )
    run_p.add_argument(
        "--dump-operator", default=None, metavar="PATH",
        help="write the first step's reduced operator in Matrix Market format",
    )

    sub.add_parser("presets", help="list available presets")

    ver_p = sub.add_parser("verify", help="re-check dissipation slack from a run directory")
    ver_p.add_argument("rundir")

    args = ap.parse_args(argv)

    if args.cmd == "presets":
        for name in preset_names():
            cfg = load_preset(name)
            print(f"{name}: {cfg.description or cfg.name}")
        return 0

    if args.cmd == "verify":
        return verify_rundir(args.rundir)

    if args.cmd == "run":
        if args.preset:
            cfg = load_preset(args.preset)
        elif args.config:
            cfg = parse_config(Path(args.config).read_text())
        else:
            run_p.error("either a config path or --preset is required")
        if args.override:
            cfg = apply_overrides(cfg, args.override)
        outdir = args.out or cfg.output.get("dir") or f"run_{cfg.name or 'out'}"
        if args.dump_operator:
            simulation.first_step_blocks(cfg).dump_matrix_market(args.dump_operator)
            print(f"reduced operator written to {args.dump_operator}")
        try:
            result = simulation.run(cfg)
        except simulation.SimulationAborted as err:
            dump = Path(outdir) / "aborted"
            write_outputs(err.partial, cfg, dump)
            print(f"aborted: {err}; state dumped to {dump}", file=sys.stderr)
            return 1
        write_outputs(result, cfg, outdir)
        last = result.records[-1]
        print(
            f"finished {last.m} steps to t={last.t:g}; energy {last.energy:.6g}; "
            f"outputs in {outdir}"
        )
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
