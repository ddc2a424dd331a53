"""Scenario-driven command line front end.

Subcommands:

* ``run <file>``: build the scenario's flow, assemble its functionals, and
  write a trajectory directory plus a series CSV into the output directory.
* ``check <file>``: reuse the run artifacts (building them on demand), drive
  the scenario's checker list concurrently, and write a JSON report array.
* ``sweep <file> --axis <name> --values v1,v2,...``: repeat a scenario along
  the ``tau`` or ``resolution`` axis; a tau sweep of a bridge scenario also
  produces the combined long-time report, a resolution sweep produces a
  self-convergence table.
* ``report <dir>``: re-emit a finished run as plot-ready long-format CSV and
  print a human-readable margin summary per checker.

Exit codes: 0 success / all checks pass, 1 some check failed, 2 configuration
error, 3 flow construction failed (the message carries the flows-module error
name).  Outputs are byte-identical across reruns with the same config and
seed.

Scenario files are JSON with a versioned ``schema`` field; unknown keys at
any level are errors, so typos in checker names or tolerances fail loudly
instead of silently running defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import checkers as checkmod
from .coefficients import CoefficientError, coefficients_from_descriptor
from .flows import (
    FlowConstructionError,
    FlowSpec,
    negate_phases,
    perturb_phase,
    reverse_trajectory,
    _density_from_descriptor,
)
from .functionals import assemble_series
from .grid import DensityFloorError, GridError
from .report import CheckReport
from .serialization import (
    SerializationError,
    load_trajectory,
    read_reports,
    read_series_csv,
    save_trajectory,
    write_reports,
    write_series_csv,
)

__all__ = ["ConfigError", "Scenario", "load_scenario", "main"]

SCENARIO_SCHEMA = 1


class ConfigError(ValueError):
    """Scenario file is malformed or requests something unsatisfiable."""


# ---------------------------------------------------------------------------
# Scenario schema


# Per-kind allowed keys for boundary and coefficient descriptors.  "cov" is
# accepted as a synonym for "variance" on Gaussian data and normalized away.
_DENSITY_KEYS = {
    "gaussian": {"kind", "mean", "variance", "cov"},
    "mixture": {"kind", "components"},
    "uniform": {"kind"},
    "gridded": {"kind", "file"},
}
_PHASE_KEYS = {
    "zero": {"kind"},
    "cosine": {"kind", "curvature", "center"},
    "mode": {"kind", "amplitude", "mode", "shift"},
}
_POTENTIAL_KEYS = {
    "zero": {"kind"},
    "quadratic": {"kind", "curvature", "center"},
    "cosine_well": {"kind", "strength", "center"},
    "gridded": {"kind", "file"},
}
_INTERACTION_KEYS = {
    "zero": {"kind"},
    "quadratic": {"kind", "strength"},
    "gridded": {"kind", "file"},
}
_CONGESTION_KEYS = {"kind", "eps", "power"}
_FAULT_KEYS = {
    "negate_phases": {"kind"},
    "reverse": {"kind"},
    "anti_diffusive": {"kind"},
    "perturb_phase": {"kind", "sample", "amplitude", "mode"},
}
_FLOW_DATA_KEYS = {
    "heat": {"initial"},
    "zero_viscosity": {"initial", "phase", "drift"},
    "bridge": {"source", "target"},
    "mfg": {"initial", "terminal_phase"},
}
_OPTION_KEYS = {"cfl", "sinkhorn_tol", "max_iter", "damping", "fp_tol",
                "max_rounds", "substeps"}
_TOP_KEYS = {"schema", "name", "grid", "flow", "coefficients", "time",
             "checkers", "seed", "out", "fault", "options"}

# Checkers driven from the assembled series, the trajectory, or the marginal
# pair.  check_longtime is sweep-only (it needs a tau list), so it is not
# listed here.
_SERIES_CHECKERS = {
    "T_inequality", "S_inequality", "entropy_growth", "turnpike", "energy",
    "matrix_energy", "cost_identity", "cost_inequality",
}
_TRAJECTORY_CHECKERS = {"time_symmetry"}
_PAIR_CHECKERS = {"evi", "contraction"}
_ALL_CHECKERS = _SERIES_CHECKERS | _TRAJECTORY_CHECKERS | _PAIR_CHECKERS


def _require_keys(mapping: dict, allowed: set, required: set, where: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(mapping)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _normalize_density(desc, base: Path, where: str) -> dict:
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ConfigError(f"{where} must be an object with a 'kind'")
    kind = desc["kind"]
    if kind not in _DENSITY_KEYS:
        raise ConfigError(f"{where}: unknown density kind {kind!r}")
    _require_keys(desc, _DENSITY_KEYS[kind], {"kind"}, where)
    out = dict(desc)
    if kind == "gaussian":
        if ("variance" in out) == ("cov" in out):
            raise ConfigError(f"{where}: give exactly one of 'variance'/'cov'")
        if "cov" in out:
            out["variance"] = out.pop("cov")
        if "mean" not in out:
            raise ConfigError(f"{where}: gaussian needs 'mean'")
    elif kind == "mixture":
        comps = out.get("components")
        if not isinstance(comps, list) or not comps:
            raise ConfigError(f"{where}: mixture needs a non-empty 'components' list")
        normalized = []
        for i, comp in enumerate(comps):
            sub = f"{where}.components[{i}]"
            _require_keys(comp, {"weight", "mean", "variance", "cov"},
                          {"weight", "mean"}, sub)
            comp = dict(comp)
            if ("variance" in comp) == ("cov" in comp):
                raise ConfigError(f"{sub}: give exactly one of 'variance'/'cov'")
            if "cov" in comp:
                comp["variance"] = comp.pop("cov")
            normalized.append(comp)
        out["components"] = normalized
    elif kind == "gridded":
        if "file" not in out:
            raise ConfigError(f"{where}: gridded density needs 'file'")
        from .serialization import read_field
        values = read_field(base / out.pop("file"))
        out["values"] = values.tolist()
    return out


def _normalize_phase(desc, where: str) -> dict:
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ConfigError(f"{where} must be an object with a 'kind'")
    kind = desc["kind"]
    if kind not in _PHASE_KEYS:
        raise ConfigError(f"{where}: unknown phase kind {kind!r}")
    _require_keys(desc, _PHASE_KEYS[kind], {"kind"}, where)
    return dict(desc)


def _normalize_coefficient(desc, keys_by_kind, base: Path, where: str) -> dict:
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ConfigError(f"{where} must be an object with a 'kind'")
    kind = desc["kind"]
    if kind not in keys_by_kind:
        raise ConfigError(f"{where}: unknown kind {kind!r}")
    _require_keys(desc, keys_by_kind[kind], {"kind"}, where)
    out = dict(desc)
    if kind == "gridded":
        if "file" not in out:
            raise ConfigError(f"{where}: gridded coefficient needs 'file'")
        from .serialization import read_field
        out["values"] = read_field(base / out.pop("file")).tolist()
    return out


@dataclass
class Scenario:
    """A fully validated scenario: a buildable FlowSpec plus checker plan."""

    name: str
    spec: FlowSpec
    checkers: list = field(default_factory=list)  # (name, tolerance-or-None)
    seed: int = 0
    out: Path = Path("runs")
    fault: dict | None = None


def load_scenario(path, out_override=None, seed_override=None) -> Scenario:
    """Parse and validate a scenario file into a Scenario."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scenario file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    _require_keys(raw, _TOP_KEYS,
                  {"schema", "name", "grid", "flow", "coefficients", "time"},
                  str(path))
    if raw["schema"] != SCENARIO_SCHEMA:
        raise ConfigError(f"{path}: unsupported schema {raw['schema']!r}")
    base = path.parent

    grid_spec = raw["grid"]
    _require_keys(grid_spec, {"dim", "extent", "points"}, {"extent", "points"},
                  "grid")
    extent = tuple(float(x) for x in grid_spec["extent"])
    points = tuple(int(n) for n in grid_spec["points"])
    if "dim" in grid_spec and int(grid_spec["dim"]) != len(points):
        raise ConfigError(f"grid: dim={grid_spec['dim']} but {len(points)} axes given")

    flow = raw["flow"]
    if not isinstance(flow, dict) or "family" not in flow:
        raise ConfigError("flow must be an object with a 'family'")
    family = flow["family"]
    if family not in _FLOW_DATA_KEYS:
        raise ConfigError(f"flow: unknown family {family!r}")
    allowed = _FLOW_DATA_KEYS[family]
    _require_keys(flow, allowed | {"family"},
                  {"family"} | (allowed & {"initial", "source", "target"}), "flow")
    data = {}
    for key in ("initial", "source", "target"):
        if key in flow:
            data[key] = _normalize_density(flow[key], base, f"flow.{key}")
    for key in ("phase", "terminal_phase"):
        if key in flow:
            data[key] = _normalize_phase(flow[key], f"flow.{key}")
    if "drift" in flow:
        data["drift"] = [float(v) for v in flow["drift"]]

    coeff_spec = raw["coefficients"]
    _require_keys(coeff_spec, {"sigma", "potential", "interaction", "congestion"},
                  {"sigma"}, "coefficients")
    coeffs = {"sigma": float(coeff_spec["sigma"])}
    if "potential" in coeff_spec:
        coeffs["potential"] = _normalize_coefficient(
            coeff_spec["potential"], _POTENTIAL_KEYS, base, "coefficients.potential")
    if "interaction" in coeff_spec:
        coeffs["interaction"] = _normalize_coefficient(
            coeff_spec["interaction"], _INTERACTION_KEYS, base, "coefficients.interaction")
    if "congestion" in coeff_spec:
        _require_keys(coeff_spec["congestion"], _CONGESTION_KEYS, {"kind"},
                      "coefficients.congestion")
        coeffs["congestion"] = dict(coeff_spec["congestion"])

    time_spec = raw["time"]
    _require_keys(time_spec, {"tau", "samples"}, {"tau", "samples"}, "time")
    tau = float(time_spec["tau"])
    samples = int(time_spec["samples"])

    options = raw.get("options", {})
    _require_keys(options, _OPTION_KEYS, set(), "options")

    checker_plan = []
    for i, item in enumerate(raw.get("checkers", [])):
        if isinstance(item, str):
            name, tol = item, None
        elif isinstance(item, dict):
            _require_keys(item, {"name", "tolerance"}, {"name"}, f"checkers[{i}]")
            name, tol = item["name"], item.get("tolerance")
            if tol is not None:
                tol = float(tol)
        else:
            raise ConfigError(f"checkers[{i}] must be a name or an object")
        if name == "longtime":
            raise ConfigError(
                "checkers[%d]: 'longtime' needs a tau list; use `sweep --axis tau`" % i)
        if name not in _ALL_CHECKERS:
            raise ConfigError(f"checkers[{i}]: unknown checker {name!r}")
        if name in _PAIR_CHECKERS and family != "bridge":
            raise ConfigError(
                f"checkers[{i}]: {name!r} needs a bridge scenario with marginal pair")
        checker_plan.append((name, tol))

    fault = raw.get("fault")
    if fault is not None:
        if not isinstance(fault, dict) or "kind" not in fault:
            raise ConfigError("fault must be an object with a 'kind'")
        kind = fault["kind"]
        if kind not in _FAULT_KEYS:
            raise ConfigError(f"fault: unknown kind {kind!r}")
        _require_keys(fault, _FAULT_KEYS[kind],
                      _FAULT_KEYS[kind] - {"mode"}, "fault")

    spec = FlowSpec(family=family, extent=extent, points=points, data=data,
                    coefficients=coeffs, tau=tau, samples=samples,
                    options=dict(options))
    # Validate coefficient descriptors eagerly so parameter-range errors
    # (e.g. a convex interaction kernel) surface as config errors, not as
    # construction failures mid-build.
    coefficients_from_descriptor(coeffs, spec.grid())

    seed = int(raw.get("seed", 0))
    if seed_override is not None:
        seed = int(seed_override)
    out = Path(raw.get("out", f"runs/{raw['name']}"))
    if out_override is not None:
        out = Path(out_override)
    elif not out.is_absolute():
        out = base / out
    return Scenario(name=str(raw["name"]), spec=spec, checkers=checker_plan,
                    seed=seed, out=out, fault=fault)


# ---------------------------------------------------------------------------
# Engine


def _apply_fault(traj, fault: dict):
    kind = fault["kind"]
    if kind == "negate_phases":
        return negate_phases(traj)
    if kind == "reverse":
        return reverse_trajectory(traj)
    if kind == "anti_diffusive":
        return negate_phases(reverse_trajectory(traj))
    if kind == "perturb_phase":
        return perturb_phase(traj, int(fault["sample"]), float(fault["amplitude"]),
                             mode=int(fault.get("mode", 1)))
    raise ConfigError(f"fault: unknown kind {kind!r}")


def _materialize(scenario: Scenario):
    """Build (or reload) the scenario's trajectory and series artifacts."""
    traj_dir = scenario.out / "trajectory"
    if (traj_dir / "metadata.json").is_file():
        traj = load_trajectory(traj_dir)
        return traj, assemble_series(traj)
    traj = scenario.spec.build()
    if scenario.fault is not None:
        traj = _apply_fault(traj, scenario.fault)
    series = assemble_series(traj)
    scenario.out.mkdir(parents=True, exist_ok=True)
    save_trajectory(traj, traj_dir)
    write_series_csv(scenario.out / "series.csv", series)
    return traj, series


def _marginals(scenario: Scenario):
    grid = scenario.spec.grid()
    data = scenario.spec.data
    return (_density_from_descriptor(grid, data["source"]),
            _density_from_descriptor(grid, data["target"]))


def _checker_call(scenario: Scenario, traj, series, name: str, tol):
    kwargs = {} if tol is None else {"tol": tol}
    if name in ("T_inequality", "S_inequality"):
        fn = getattr(checkmod, f"check_{name}")
        return partial(fn, series, seed=scenario.seed, **kwargs)
    if name in _SERIES_CHECKERS:
        return partial(getattr(checkmod, f"check_{name}"), series, **kwargs)
    if name == "time_symmetry":
        return partial(checkmod.check_time_symmetry, traj, **kwargs)
    if name in _PAIR_CHECKERS:
        mu_a, mu_z = _marginals(scenario)
        return partial(getattr(checkmod, f"check_{name}"), mu_a, mu_z, **kwargs)
    raise ConfigError(f"unknown checker {name!r}")


def _run_checkers(scenario: Scenario, traj, series, threads: int) -> list:
    calls = [_checker_call(scenario, traj, series, name, tol)
             for name, tol in scenario.checkers]
    if not calls:
        return []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(call) for call in calls]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_run(scenario: Scenario, threads: int) -> int:
    traj, series = _materialize(scenario)
    print(f"{scenario.name}: {traj.family} flow, {traj.samples} samples, "
          f"dim {series.dim}")
    print(f"wrote {scenario.out / 'trajectory'} and {scenario.out / 'series.csv'}")
    return 0


def cmd_check(scenario: Scenario, threads: int) -> int:
    traj, series = _materialize(scenario)
    reports = _run_checkers(scenario, traj, series, threads)
    scenario.out.mkdir(parents=True, exist_ok=True)
    write_reports(scenario.out / "reports.json", reports)
    for rep in reports:
        print(rep.summary_line())
    if not reports:
        print(f"{scenario.name}: no checkers configured")
        return 0
    return 0 if all(r.passed for r in reports) else 1


def cmd_sweep(scenario: Scenario, axis: str, values: list, threads: int) -> int:
    if not values:
        raise ConfigError("sweep: empty value list")
    if axis == "tau":
        return _sweep_tau(scenario, [float(v) for v in values], threads)
    if axis == "resolution":
        return _sweep_resolution(scenario, [int(v) for v in values], threads)
    raise ConfigError(f"sweep: unknown axis {axis!r} (use 'tau' or 'resolution')")


def _sub_scenario(scenario: Scenario, tag: str, spec: FlowSpec) -> Scenario:
    return Scenario(name=f"{scenario.name}-{tag}", spec=spec,
                    checkers=scenario.checkers, seed=scenario.seed,
                    out=scenario.out / tag, fault=scenario.fault)


def _sweep_tau(scenario: Scenario, taus: list, threads: int) -> int:
    if any(t <= 0 for t in taus):
        raise ConfigError("sweep: tau values must be positive")
    for tau in taus:
        sub = _sub_scenario(scenario, f"tau_{tau:g}",
                            replace(scenario.spec, tau=tau))
        _materialize(sub)
        print(f"tau={tau:g}: wrote {sub.out}")
    if scenario.spec.family != "bridge":
        manifest = {"axis": "tau", "values": taus,
                    "runs": [f"tau_{t:g}" for t in taus]}
        _write_manifest(scenario.out / "sweep.json", manifest)
        return 0
    mu_a, mu_z = _marginals(scenario)
    report = checkmod.check_longtime(
        (mu_a, mu_z, scenario.spec.coefficients["sigma"]), tau_list=tuple(taus))
    write_reports(scenario.out / "longtime.json", [report])
    print(report.summary_line())
    return 0 if report.passed else 1


def _sweep_resolution(scenario: Scenario, resolutions: list, threads: int) -> int:
    dim = len(scenario.spec.points)
    tables = []
    for res in resolutions:
        spec = replace(scenario.spec, points=(res,) * dim)
        sub = _sub_scenario(scenario, f"resolution_{res}", spec)
        _, series = _materialize(sub)
        tables.append((res, series))
        print(f"resolution={res}: wrote {sub.out}")
    lines = ["coarse,fine,quantity,max_abs_delta"]
    for (r0, s0), (r1, s1) in zip(tables, tables[1:]):
        for quantity, a, b in (
                ("E", s0.entropy, s1.entropy),
                ("O", s0.energy, s1.energy),
                ("TrS", s0.production_trace(), s1.production_trace())):
            delta = float(np.max(np.abs(a - b)))
            lines.append(f"{r0},{r1},{quantity},{delta!r}")
            print(f"{quantity}: {r0} -> {r1} changes by {delta:.3e}")
    scenario.out.mkdir(parents=True, exist_ok=True)
    (scenario.out / "convergence.csv").write_text("\n".join(lines) + "\n")
    return 0


def _write_manifest(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_report(run_dir: Path) -> int:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"report: {run_dir} is not a directory")
    series_path = run_dir / "series.csv"
    reports_path = run_dir / "reports.json"
    if not series_path.is_file() and not reports_path.is_file():
        raise ConfigError(f"report: {run_dir} holds no series.csv or reports.json")

    if series_path.is_file():
        table = read_series_csv(series_path)
        lines = ["time,quantity,component,value"]
        times = table["times"]
        for label, column in (("E", table["entropy"]), ("O", table["energy"])):
            for t, v in zip(times, column):
                lines.append(f"{t!r},{label},,{v!r}")
        dim = table["dim"]
        for block, stack in table["matrices"].items():
            for i in range(dim):
                for j in range(i, dim):
                    for t, v in zip(times, stack[:, i, j]):
                        lines.append(f"{t!r},{block},{i}{j},{v!r}")
        (run_dir / "long.csv").write_text("\n".join(lines) + "\n")
        print(f"wrote {run_dir / 'long.csv'}")

    if reports_path.is_file():
        for rep in read_reports(reports_path):
            print(rep.summary_line())
            for key in ("time", "check", "direction", "tau"):
                if key in rep.witness:
                    print(f"    witness {key}: {rep.witness[key]}")
            for note in rep.notes:
                print(f"    note: {note}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand-level flag from clobbering the same flag
    # given before the subcommand.
    shared.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="checker thread pool size (default 4)")
    shared.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override the scenario's direction-sampling seed")
    shared.add_argument("--out", type=Path, default=argparse.SUPPRESS,
                        help="override the scenario's output directory")

    parser = argparse.ArgumentParser(
        prog="flowlab",
        description="Construct density flows, evaluate their matrix "
                    "functionals, and certify differential inequalities.",
        parents=[shared])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[shared],
                           help="build a flow and write its artifacts")
    p_run.add_argument("scenario", type=Path)

    p_check = sub.add_parser("check", parents=[shared],
                             help="run the scenario's checkers")
    p_check.add_argument("scenario", type=Path)

    p_sweep = sub.add_parser("sweep", parents=[shared],
                             help="repeat a scenario along tau or resolution")
    p_sweep.add_argument("scenario", type=Path)
    p_sweep.add_argument("--axis", required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_report = sub.add_parser("report", parents=[shared],
                              help="summarize a finished run directory")
    p_report.add_argument("run_dir", type=Path)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    threads = getattr(args, "threads", 4)
    seed = getattr(args, "seed", None)
    out = getattr(args, "out", None)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        scenario = load_scenario(args.scenario, out_override=out,
                                 seed_override=seed)
        if args.command == "run":
            return cmd_run(scenario, threads)
        if args.command == "check":
            return cmd_check(scenario, threads)
        if args.command == "sweep":
            values = [v for v in args.values.split(",") if v.strip()]
            return cmd_sweep(scenario, args.axis, values, threads)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, CoefficientError, GridError, SerializationError,
            ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FlowConstructionError, DensityFloorError) as exc:
        print(f"construction failed: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
