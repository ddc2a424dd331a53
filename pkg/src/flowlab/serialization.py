"""On-disk artifact formats.

Four artifact kinds, each with a writer and a reader that round-trips it:

* binary field snapshot: 16-byte header (2-byte magic ``FL``, uint16 dim,
  three uint32 axis sizes, unused slots zero), then the samples as
  little-endian 64-bit floats in row-major order.  Bit-exact.
* trajectory directory: ``metadata.json`` (grid, times, coefficient
  descriptor, family, boundary record, stamps, diagnostics) plus one field
  file per snapshot for the density and one for the phase.
* functional-series CSV: one row per sample time, columns ``t,E,O`` then the
  row-major upper triangle of each matrix path (S, I, Tplus, Tminus, Emat).
  A leading comment line carries the schema version and the matrix dimension
  explicitly.  Floats are written with shortest round-trip repr, so re-reading
  reproduces the exact doubles and re-writing reproduces the exact bytes.
* check-report JSON: an array of CheckReport dicts.

All JSON is written with sorted keys and a trailing newline so identical
payloads serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .coefficients import coefficients_from_descriptor
from .flows import FlowTrajectory
from .functionals import FunctionalSeries
from .grid import Density, Grid, ScalarField
from .report import CheckReport, _json_revive, _json_safe

__all__ = [
    "SerializationError",
    "write_field",
    "read_field",
    "save_trajectory",
    "load_trajectory",
    "write_series_csv",
    "read_series_csv",
    "write_reports",
    "read_reports",
]

FIELD_MAGIC = b"FL"
_FIELD_HEADER = struct.Struct("<2sH3I")  # magic, dim, N_1..N_3 -> 16 bytes
TRAJECTORY_SCHEMA = 1
SERIES_SCHEMA = 1

# Matrix columns in the series CSV, in order: header prefix -> series path.
_MATRIX_BLOCKS = ("S", "I", "Tplus", "Tminus", "Emat")


class SerializationError(ValueError):
    """A file is malformed, inconsistent, or not the claimed artifact kind."""


# ---------------------------------------------------------------------------
# Binary field snapshots


def write_field(path, field) -> None:
    """Write a scalar field (or bare array) as a binary snapshot."""
    values = getattr(field, "values", field)
    values = np.ascontiguousarray(values, dtype="<f8")
    if not 1 <= values.ndim <= 3:
        raise SerializationError(f"field must be 1-3 dimensional, got {values.ndim}")
    sizes = list(values.shape) + [0] * (3 - values.ndim)
    with open(path, "wb") as fh:
        fh.write(_FIELD_HEADER.pack(FIELD_MAGIC, values.ndim, *sizes))
        fh.write(values.tobytes())


def read_field(path) -> np.ndarray:
    """Read a binary snapshot back as a float64 array, bit for bit."""
    raw = Path(path).read_bytes()
    if len(raw) < _FIELD_HEADER.size:
        raise SerializationError(f"{path}: truncated header")
    magic, dim, *sizes = _FIELD_HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise SerializationError(f"{path}: bad magic {magic!r}")
    if not 1 <= dim <= 3:
        raise SerializationError(f"{path}: bad dimension {dim}")
    shape = tuple(sizes[:dim])
    if any(s <= 0 for s in shape) or any(s != 0 for s in sizes[dim:]):
        raise SerializationError(f"{path}: inconsistent axis sizes {sizes}")
    count = int(np.prod(shape))
    payload = raw[_FIELD_HEADER.size:]
    if len(payload) != 8 * count:
        raise SerializationError(
            f"{path}: payload holds {len(payload)} bytes, expected {8 * count}")
    flat = np.frombuffer(payload, dtype="<f8", count=count)
    return flat.astype(np.float64, copy=True).reshape(shape)


# ---------------------------------------------------------------------------
# Trajectory directories


def save_trajectory(traj: FlowTrajectory, directory) -> Path:
    """Write a trajectory as metadata.json plus per-snapshot field files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    snapshots = []
    for i in range(traj.samples):
        rho_name = f"rho_{i:04d}.field"
        theta_name = f"theta_{i:04d}.field"
        write_field(directory / rho_name, traj.densities[i])
        write_field(directory / theta_name, traj.phases[i])
        snapshots.append({"density": rho_name, "phase": theta_name})
    meta = {
        "schema": TRAJECTORY_SCHEMA,
        "kind": "trajectory",
        "family": traj.family,
        "grid": {"extent": list(traj.grid.extent), "points": list(traj.grid.points)},
        "times": [float(t) for t in traj.times],
        "coefficients": traj.coefficients.descriptor(),
        "boundary": _json_safe(traj.boundary),
        "drift": [float(v) for v in traj.drift],
        "stamps": _json_safe(traj.stamps),
        "diagnostics": _json_safe(traj.diagnostics),
        "truncated": traj.truncated,
        "snapshots": snapshots,
    }
    _write_json(directory / "metadata.json", meta)
    return directory


def load_trajectory(directory) -> FlowTrajectory:
    """Rebuild a trajectory from a directory written by save_trajectory."""
    directory = Path(directory)
    meta = _read_json(directory / "metadata.json")
    if meta.get("kind") != "trajectory":
        raise SerializationError(f"{directory}: metadata is not a trajectory record")
    if meta.get("schema") != TRAJECTORY_SCHEMA:
        raise SerializationError(f"{directory}: unsupported schema {meta.get('schema')!r}")
    grid = Grid(tuple(meta["grid"]["extent"]), tuple(meta["grid"]["points"]))
    densities, phases = [], []
    for snap in meta["snapshots"]:
        rho_values = read_field(directory / snap["density"])
        if rho_values.shape != grid.shape:
            raise SerializationError(
                f"{snap['density']}: shape {rho_values.shape} != grid {grid.shape}")
        rho = Density(grid, rho_values)
        # Construction validated positivity and mass; keep the stored bits
        # rather than the renormalized copy so round-trips are exact.
        rho.values = rho_values
        densities.append(rho)
        phases.append(ScalarField(grid, read_field(directory / snap["phase"])))
    coeffs = coefficients_from_descriptor(meta["coefficients"], grid)
    drift = meta.get("drift")
    return FlowTrajectory(
        grid=grid,
        times=np.asarray(meta["times"], dtype=np.float64),
        densities=densities,
        phases=phases,
        coefficients=coeffs,
        family=meta["family"],
        boundary=_json_revive(meta.get("boundary", {})),
        drift=None if drift is None else np.asarray(drift, dtype=np.float64),
        stamps=_json_revive(meta.get("stamps", {})),
        diagnostics=_json_revive(meta.get("diagnostics", {})),
        truncated=meta.get("truncated"),
    )


# ---------------------------------------------------------------------------
# Functional-series CSV


def _triangle_pairs(dim: int) -> list:
    return [(i, j) for i in range(dim) for j in range(i, dim)]


def _series_columns(dim: int) -> list:
    names = ["t", "E", "O"]
    for block in _MATRIX_BLOCKS:
        names.extend(f"{block}_{i}{j}" for i, j in _triangle_pairs(dim))
    return names


def _matrix_paths(series: FunctionalSeries) -> dict:
    return {
        "S": series.production,
        "I": series.fisher,
        "Tplus": series.t_plus,
        "Tminus": series.t_minus,
        "Emat": series.matrix_energy_path(),
    }


def write_series_csv(path, series: FunctionalSeries) -> None:
    """Write the scalar and matrix functional paths of a series as CSV."""
    dim = series.dim
    pairs = _triangle_pairs(dim)
    matrices = _matrix_paths(series)
    lines = [
        f"# functional-series schema={SERIES_SCHEMA} dim={dim} sigma={series.sigma!r}",
        ",".join(_series_columns(dim)),
    ]
    for k in range(series.samples):
        row = [series.times[k], series.entropy[k], series.energy[k]]
        for block in _MATRIX_BLOCKS:
            mat = matrices[block][k]
            row.extend(mat[i, j] for i, j in pairs)
        lines.append(",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_series_csv(path) -> dict:
    """Parse a series CSV into arrays; symmetric matrices are completed.

    Returns a dict with keys ``schema``, ``dim``, ``sigma``, ``times``,
    ``entropy``, ``energy`` and ``matrices`` (mapping S/I/Tplus/Tminus/Emat
    to (samples, dim, dim) arrays).
    """
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or not lines[0].startswith("# functional-series"):
        raise SerializationError(f"{path}: missing series preamble")
    preamble = dict(
        item.split("=", 1) for item in lines[0].lstrip("# ").split() if "=" in item)
    try:
        schema = int(preamble["schema"])
        dim = int(preamble["dim"])
        sigma = float(preamble["sigma"])
    except (KeyError, ValueError) as exc:
        raise SerializationError(f"{path}: bad preamble {lines[0]!r}") from exc
    if schema != SERIES_SCHEMA:
        raise SerializationError(f"{path}: unsupported schema {schema}")
    columns = _series_columns(dim)
    if lines[1].split(",") != columns:
        raise SerializationError(f"{path}: header does not match dim={dim} layout")
    rows = []
    for ln in lines[2:]:
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != len(columns):
            raise SerializationError(f"{path}: row has {len(parts)} fields, "
                                     f"expected {len(columns)}")
        rows.append([float(p) for p in parts])
    data = np.asarray(rows, dtype=np.float64)
    if data.size == 0:
        raise SerializationError(f"{path}: no sample rows")
    pairs = _triangle_pairs(dim)
    matrices = {}
    offset = 3
    for block in _MATRIX_BLOCKS:
        stack = np.zeros((data.shape[0], dim, dim))
        for col, (i, j) in enumerate(pairs):
            stack[:, i, j] = data[:, offset + col]
            stack[:, j, i] = data[:, offset + col]
        matrices[block] = stack
        offset += len(pairs)
    return {
        "schema": schema,
        "dim": dim,
        "sigma": sigma,
        "times": data[:, 0],
        "entropy": data[:, 1],
        "energy": data[:, 2],
        "matrices": matrices,
    }


# ---------------------------------------------------------------------------
# Check-report JSON


def write_reports(path, reports) -> None:
    """Write an iterable of CheckReport objects as a JSON array."""
    _write_json(path, [r.to_dict() for r in reports])


def read_reports(path) -> list:
    data = _read_json(path)
    if not isinstance(data, list):
        raise SerializationError(f"{path}: report file must hold a JSON array")
    return [CheckReport.from_dict(item) for item in data]


# ---------------------------------------------------------------------------
# Shared JSON helpers


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SerializationError(f"{path}: missing") from None
    except json.JSONDecodeError as exc:
        raise SerializationError(f"{path}: invalid JSON ({exc})") from None
