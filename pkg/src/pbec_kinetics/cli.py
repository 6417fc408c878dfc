"""Configuration, command-line entry points and output formats.

Configuration is YAML with four sections (scene, solver, hierarchy,
experiment) plus an optional output section. Parsing is strict: unknown
keys, wrong types and missing required keys are reported with their key path.
"""
import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import re
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import analysis, experiments
from .hierarchy import build_hierarchy
from .model import ConfigError, PumpSchedule, build_scene
from .solver import Dynamics, IntegratorSettings, SolverError, continuation_sweep

log = logging.getLogger("pbec_kinetics")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a sign (1e13, 1.0e-4)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."))


def _yaml_load(text):
    return yaml.load(text, Loader=_Loader)


EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_TIMEOUT = 0, 2, 3, 4
REQUIRED = object()

# key -> (kind, default); kinds: int, float, floats, int_or_none, float_or_none, ints, schedule, str
SCHEMA = {
    "scene": {
        "max_level": ("int", REQUIRED),
        "A_per_level": ("floats", REQUIRED),
        "E_per_level": ("floats", REQUIRED),
        "density": ("float", REQUIRED),
        "N_per_bin": ("float", REQUIRED),
        "Gamma_down": ("float", REQUIRED),
        "extent": ("float", 5.0),
        "coupling_scale": ("float", 1.0),
    },
    "solver": {
        "rel_tol": ("float", 1e-10),
        "abs_tol_n": ("float", 1e-20),
        "abs_tol_f": ("float", 1e-18),
        "max_step": ("float_or_none", None),
    },
    "hierarchy": {
        "depth": ("int_or_none", 2),
        "check_depths": ("ints", [0, 1, 2, 3]),
        "check_points": ("floats", []),
    },
    "experiment": {
        "P_min": ("float", 1e-4),
        "P_max": ("float", 1.0),
        "n_points": ("int", 200),
        "P_grid": ("floats", []),
        "quench_fraction": ("float", 0.01),
        "threshold": ("float", 1e-6),
        "t_max": ("float", 1e6),
        "abs_floor": ("float", 0.0),
        "P_start_grid": ("floats", []),
        "P_end_grid": ("floats", []),
        "quench_P_start": ("float", 3.16e-4),
        "quench_P_end": ("float", 0.25),
        "trace_t_min": ("float", 1e-2),
        "trace_t_max": ("float", 1e4),
        "trace_points": ("int", 400),
        "schedule_initial": ("float_or_none", None),
        "schedule": ("schedule", []),
        "schedule_delays": ("floats", []),
        "transition_width": ("float", 1e-3),
        "tail_window": ("floats", [10.0, 1e3]),
    },
    "output": {
        "dir": ("str", "out"),
        "format": ("str", "csv"),
    },
}


def _check(kind, value, path):
    def bad(expected):
        return ConfigError(f"{path}: expected {expected}, got {value!r}")

    def num(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if kind == "int_or_none":
        return None if value is None else _check("int", value, path)
    if kind == "float":
        if not num(value):
            raise bad("a number")
        return float(value)
    if kind == "float_or_none":
        return None if value is None else _check("float", value, path)
    if kind == "str":
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if kind in ("floats", "ints"):
        if not isinstance(value, list):
            raise bad("a list")
        sub = "float" if kind == "floats" else "int"
        return [_check(sub, v, f"{path}[{k}]") for k, v in enumerate(value)]
    if kind == "schedule":
        if not isinstance(value, list):
            raise bad("a list of [start_time, P] pairs")
        out = []
        for k, seg in enumerate(value):
            if not (isinstance(seg, list) and len(seg) == 2):
                raise ConfigError(f"{path}[{k}]: expected [start_time, P], got {seg!r}")
            out.append([_check("float", seg[0], f"{path}[{k}][0]"),
                        _check("float", seg[1], f"{path}[{k}][1]")])
        return out
    raise AssertionError(kind)


@dataclass(frozen=True)
class RunConfig:
    data: dict

    def __getitem__(self, section):
        return self.data[section]

    def canonical_json(self):
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def scene(self):
        return build_scene(**self.data["scene"])

    def settings(self):
        s = self.data["solver"]
        return IntegratorSettings(s["rel_tol"], s["abs_tol_n"], s["abs_tol_f"],
                                  math.inf if s["max_step"] is None else s["max_step"])

    def P_grid(self):
        e = self.data["experiment"]
        if e["P_grid"]:
            return sorted(e["P_grid"])
        return list(np.geomspace(e["P_min"], e["P_max"], e["n_points"]))


def config_from_dict(raw, source="<dict>"):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    unknown = [k for k in raw if k not in SCHEMA]
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(map(str, unknown)))}")
    out, missing = {}, []
    for section, keys in SCHEMA.items():
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"{section}: expected a mapping")
        bad = [k for k in given if k not in keys]
        if bad:
            raise ConfigError("unknown key(s): " + ", ".join(f"{section}.{k}" for k in sorted(bad)))
        out[section] = {}
        for key, (kind, default) in keys.items():
            if key in given:
                out[section][key] = _check(kind, given[key], f"{section}.{key}")
            elif default is REQUIRED:
                missing.append(f"{section}.{key}")
            else:
                out[section][key] = copy.deepcopy(default)
    if missing:
        raise ConfigError("missing required key(s): " + ", ".join(missing))
    e = out["experiment"]
    if not 0 < e["threshold"] < 1:
        raise ConfigError("experiment.threshold: must lie in (0, 1)")
    if not 0 < e["P_min"] < e["P_max"]:
        raise ConfigError("experiment.P_min/P_max: need 0 < P_min < P_max")
    if out["output"]["format"] not in ("csv", "json"):
        raise ConfigError("output.format: must be csv or json")
    if e["schedule"]:
        try:
            PumpSchedule(tuple(map(tuple, e["schedule"])))
        except ConfigError as exc:
            raise ConfigError(f"experiment.schedule: {exc}") from None
    return RunConfig(out)


def parse_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = _yaml_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return config_from_dict(raw, str(path))


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("pbec_kinetics.presets").iterdir()
                  if p.name.endswith(".yaml"))


def load_preset(name):
    f = resources.files("pbec_kinetics.presets") / f"{name}.yaml"
    if not f.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return config_from_dict(_yaml_load(f.read_text()), f"preset {name}")


# ---- output --------------------------------------------------------------------

def fmt_number(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else f"{float(x):.16e}"
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def write_table(path, columns, rows, meta, fmt="csv"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = path.with_suffix(".json")
        payload = {"metadata": meta, "columns": columns,
                   "rows": [dict(zip(columns, r)) for r in rows]}
        path.write_text(json.dumps(_jsonable(payload), indent=1, sort_keys=True) + "\n")
        return path
    path = path.with_suffix(".csv")
    with path.open("w", newline="") as fh:
        fh.write("# " + json.dumps(_jsonable(meta), sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt_number(v) for v in r])
    return path


def write_json(path, data, meta):
    path = Path(path).with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable({"metadata": meta, **data}), indent=1, sort_keys=True) + "\n")
    return path


def read_table(path):
    """Read a CSV written by write_table: returns (metadata, columns, rows of strings)."""
    lines = Path(path).read_text().splitlines()
    meta = json.loads(lines[0][2:]) if lines and lines[0].startswith("# ") else {}
    body = [ln for ln in lines if not ln.startswith("#")]
    rows = list(csv.reader(body))
    return meta, rows[0], rows[1:]


def metadata(cfg, command, dyn, settings, partial=False, extra=None):
    m = {"artifact": "pbec_kinetics", "version": __version__, "command": command,
         "config_hash": cfg.hash, "config": cfg.data, "solver_tolerances": settings.as_dict(),
         "hierarchy_depth": dyn.depth, "representation": dyn.metadata(),
         "grid": dyn.scene.metadata(), "partial": partial,
         "integrator": "Radau IIA (order 5), analytic Jacobian"}
    if extra:
        m.update(extra)
    return m


# ---- commands ---------------------------------------------------------------------

def _dynamics(cfg):
    scene = cfg.scene()
    depth = cfg["hierarchy"]["depth"]
    basis = None if depth is None else build_hierarchy(scene, depth)
    return Dynamics(scene, basis)


def _n_columns(scene):
    return [f"n_{lab}" for lab in scene.modes.labels()]


def cmd_steady(cfg, dyn, settings, args):
    sweep = continuation_sweep(cfg.P_grid(), settings=settings, dynamics=dyn)
    cols = ["P", "residual_norm", "converged"] + _n_columns(dyn.scene)
    rows = [[s.P, s.residual_norm, s.converged] + list(s.state.n) for s in sweep]
    return write_table(Path(args.out) / "steady", cols, rows,
                       metadata(cfg, "steady", dyn, settings), args.format), 0


def _transitions(sweep, dyn, settings, cfg):
    if len(sweep) < 3:
        log.warning("fewer than 3 sweep points: transition detection skipped")
        return []
    return analysis.detect_transitions(sweep, dyn, settings, cfg["experiment"]["transition_width"])


def cmd_sweep(cfg, dyn, settings, args):
    e = cfg["experiment"]
    grid = cfg.P_grid()
    ends = [P * (1 + e["quench_fraction"]) for P in grid]
    steady = continuation_sweep(sorted(set(grid + ends)), settings=settings, dynamics=dyn)
    by_P = {s.P: s for s in steady}
    trans = _transitions([by_P[P] for P in grid], dyn, settings, cfg)
    crits = analysis.interval_bounds(trans)
    recs = experiments.sweep_1d(grid, e["quench_fraction"], e["threshold"], dyn.scene, settings,
                                dyn.basis, e["t_max"], e["abs_floor"], args.jobs, by_P)
    cols = ["P", "P_end", "t_eq", "t_last", "converged"] + _n_columns(dyn.scene) + ["interval"]
    rows = [[r.P_start, r.P_end, r.t_eq, r.t_last, r.converged] + list(by_P[r.P_start].state.n)
            + [experiments.interval_label(r.P_end, crits)] for r in recs]
    n_to = sum(not r.converged for r in recs)
    meta = metadata(cfg, "sweep", dyn, settings, partial=n_to > 0,
                    extra={"transitions": [_transition_dict(t) for t in trans], "n_failed": n_to})
    path = write_table(Path(args.out) / "sweep", cols, rows, meta, args.format)
    return path, (EXIT_TIMEOUT if n_to > len(recs) / 2 else 0)


def cmd_quench(cfg, dyn, settings, args):
    e = cfg["experiment"]
    times = np.concatenate([[0.0], np.geomspace(e["trace_t_min"], e["trace_t_max"], e["trace_points"])])
    tr = experiments.big_quench_trace(e["quench_P_start"], e["quench_P_end"], times, dyn.scene,
                                      settings, dyn.basis)
    cols = ["t"] + _n_columns(dyn.scene)
    rows = [[t] + list(n) for t, n in zip(tr.times, tr.n)]
    meta = metadata(cfg, "quench", dyn, settings, extra={
        "P_start": tr.P_start, "P_end": tr.P_end, "n_start": tr.n_start, "n_end": tr.n_end,
        "n_peak": tr.n_peak, "t_peak": tr.t_peak,
        "eta_end": analysis.effective_view(tr.steady_end.state, dyn.scene, dyn.basis).eta})
    return write_table(Path(args.out) / "quench", cols, rows, meta, args.format), 0


def cmd_map2d(cfg, dyn, settings, args):
    e = cfg["experiment"]
    if not e["P_start_grid"] or not e["P_end_grid"]:
        raise ConfigError("experiment.P_start_grid and experiment.P_end_grid are required for map2d")
    crits = None
    if args.labels:
        lo = min(e["P_start_grid"] + e["P_end_grid"]) / 2
        hi = max(e["P_start_grid"] + e["P_end_grid"]) * 2
        sweep = continuation_sweep(list(np.geomspace(lo, hi, 200)), settings=settings, dynamics=dyn)
        crits = analysis.interval_bounds(_transitions(sweep, dyn, settings, cfg))
    qm = experiments.quench_map(e["P_start_grid"], e["P_end_grid"], e["threshold"], dyn.scene,
                                settings, dyn.basis, e["t_max"], e["abs_floor"], args.jobs, crits)
    cols = ["P_start", "P_end", "t_eq", "converged", "interval_start", "interval_end"]
    rows = []
    for a, P0 in enumerate(qm.P_start_grid):
        for b, P1 in enumerate(qm.P_end_grid):
            rows.append([P0, P1, qm.t_eq[a, b], bool(qm.converged[a, b]),
                         qm.labels_start[a], qm.labels_end[b]])
    n_to = int((~qm.converged).sum())
    meta = metadata(cfg, "map2d", dyn, settings, partial=n_to > 0, extra={"P_crit": crits})
    path = write_table(Path(args.out) / "map2d", cols, rows, meta, args.format)
    return path, (EXIT_TIMEOUT if n_to > qm.converged.size / 2 else 0)


def cmd_schedule(cfg, dyn, settings, args):
    e = cfg["experiment"]
    if not e["schedule"]:
        raise ConfigError("experiment.schedule is required for the schedule command")
    base = PumpSchedule(tuple(map(tuple, e["schedule"])))
    variants = [("configured", base)]
    if e["schedule_delays"]:
        if len(base.segments) != 2:
            raise ConfigError("experiment.schedule_delays needs a two-segment schedule")
        (_, P_mid), (_, P_fin) = base.segments
        variants = [("direct", PumpSchedule.constant(P_fin))]
        variants += [(f"delay={dl:g}", PumpSchedule(((0.0, P_mid), (dl, P_fin))))
                     for dl in e["schedule_delays"]]
    P0 = e["schedule_initial"]
    cols = ["variant", "delay", "t_eq", "t_total", "converged"] + [
        f"peak_{lab}" for lab in dyn.scene.modes.labels()]
    rows = []
    for name, sch in variants:
        r = experiments.run_schedule(sch, e["threshold"], dyn.scene, settings, dyn.basis, P0,
                                     e["t_max"], e["abs_floor"])
        rows.append([name, sch.last_switch, r.t_eq, r.extra["t_total"], r.converged] + list(r.n_peak))
    meta = metadata(cfg, "schedule", dyn, settings)
    return write_table(Path(args.out) / "schedule", cols, rows, meta, args.format), 0


def _transition_dict(t):
    return {"P_crit": t.P_crit, "mode": t.mode.label(), "modes": [m.label() for m in t.modes],
            "kind": t.kind, "slope": t.slope, "bracket": list(t.bracket)}


def cmd_fit(cfg, dyn, settings, args):
    if not args.input:
        raise ConfigError("fit requires --input pointing at a sweep CSV from a previous run")
    meta_in, cols, rows = read_table(args.input)
    labels = dyn.scene.modes.labels()
    ncols = [cols.index(f"n_{lab}") for lab in labels]
    P = np.array([float(r[cols.index("P")]) for r in rows])
    n = np.array([[float(r[k]) for k in ncols] for r in rows])
    report = {"source": str(args.input), "source_config_hash": meta_in.get("config_hash")}
    trans = analysis.detect_transitions((P, n), modes=dyn.scene.modes.modes) if len(P) >= 3 else []
    report["transitions"] = [_transition_dict(t) for t in trans]
    if "t_eq" in cols:
        P_end = np.array([float(r[cols.index("P_end")]) for r in rows])
        t_eq = np.array([float(r[cols.index("t_eq")]) for r in rows])
        fits = []
        for t in trans:
            d = np.abs(P_end - t.P_crit)
            near = (d <= 0.1 * t.P_crit) & np.isfinite(t_eq)
            try:
                lo, hi = analysis.fit_critical_exponent((P_end[near], t_eq[near]), t.P_crit)
                fits.append({"P_crit": t.P_crit, "below": vars(lo), "above": vars(hi)})
            except analysis.FitError as exc:
                fits.append({"P_crit": t.P_crit, "error": str(exc)})
        report["exponent_fits"] = fits
    if args.trace:
        tmeta, tcols, trows = read_table(args.trace)
        times = np.array([float(r[0]) for r in trows])
        k = tcols.index(f"n_{args.mode}")
        nn = np.array([float(r[k]) for r in trows])
        i = labels.index(args.mode)
        eta, n_eq = tmeta["eta_end"][i], tmeta["n_end"][i]
        keep = times > 0
        tail = analysis.fit_tail(times[keep], nn[keep], eta, n_eq, tuple(cfg["experiment"]["tail_window"]))
        report["tail"] = vars(tail)
    return write_json(Path(args.out) / "fit", report, metadata(cfg, "fit", dyn, settings)), 0


def cmd_hierarchy_check(cfg, dyn, settings, args):
    scene = dyn.scene
    depths = [int(x) for x in args.depths.split(",")] if args.depths else cfg["hierarchy"]["check_depths"]
    pts = cfg["hierarchy"]["check_points"] or list(np.geomspace(cfg["experiment"]["P_min"],
                                                                 cfg["experiment"]["P_max"], 20))
    full = Dynamics(scene)
    ref = continuation_sweep(sorted(pts), settings=settings, dynamics=full)
    cols = ["depth", "rank", "P", "max_rel_error"]
    rows, summary = [], {}
    for L in depths:
        d = Dynamics(scene, build_hierarchy(scene, L))
        hs = continuation_sweep(sorted(pts), settings=settings, dynamics=d)
        errs = [float(np.max(np.abs(h.state.n - r.state.n) / r.state.n)) for h, r in zip(hs, ref)]
        rows += [[L, d.basis.rank, r.P, e] for r, e in zip(ref, errs)]
        summary[str(L)] = max(errs)
    meta = metadata(cfg, "hierarchy-check", full, settings, extra={"max_error_by_depth": summary})
    return write_table(Path(args.out) / "hierarchy_check", cols, rows, meta, args.format), 0


COMMANDS = {"steady": cmd_steady, "sweep": cmd_sweep, "quench": cmd_quench, "map2d": cmd_map2d,
            "schedule": cmd_schedule, "fit": cmd_fit, "hierarchy-check": cmd_hierarchy_check}


def build_parser():
    p = argparse.ArgumentParser(prog="pbec-kinetics", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        g = s.add_mutually_exclusive_group()
        g.add_argument("--config", type=Path)
        g.add_argument("--preset")
        s.add_argument("--out", default=None)
        s.add_argument("--jobs", type=int, default=1)
        h = s.add_mutually_exclusive_group()
        h.add_argument("--hierarchy-depth", type=int, default=None)
        h.add_argument("--full-field", action="store_true")
        s.add_argument("--format", choices=["csv", "json"], default=None)
        if name == "fit":
            s.add_argument("--input", type=Path)
            s.add_argument("--trace", type=Path)
            s.add_argument("--mode", default="[0,1]")
        if name == "hierarchy-check":
            s.add_argument("--depths", default=None)
        if name == "map2d":
            s.add_argument("--labels", action="store_true", help="attach interval labels (extra sweep)")
    return p


def resolve_config(args):
    if args.config is not None:
        cfg = parse_config(args.config)
    else:
        cfg = load_preset(args.preset or "paper_fig1")
    data = copy.deepcopy(cfg.data)
    if args.full_field:
        data["hierarchy"]["depth"] = None
    elif args.hierarchy_depth is not None:
        data["hierarchy"]["depth"] = args.hierarchy_depth
    if args.out is not None:
        data["output"]["dir"] = args.out
    if args.format is not None:
        data["output"]["format"] = args.format
    args.out, args.format = data["output"]["dir"], data["output"]["format"]
    return config_from_dict(data)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        dyn = _dynamics(cfg)
        path, code = COMMANDS[args.command](cfg, dyn, cfg.settings(), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
