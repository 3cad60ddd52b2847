"""
Artifact formats: value fields (CSV and binary), trajectories and long-format
tables. Floats are written with repr() so a fixed run writes identical bytes.

Binary value-field layout (little-endian):

    8 bytes   magic b"EHJBVF01"
    uint32    d
    uint32    nodes per axis (d entries)
    float64   lower corner (d entries)
    float64   upper corner (d entries)
    float64   values, row-major (C order)
"""
import csv
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from app.exceptions import InputError
from app.services.hjb import Grid, ValueField
from app.services.trajectory import Trajectory

MAGIC = b"EHJBVF01"
PathLike = Union[str, Path]


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _writer(handle):
    return csv.writer(handle, lineterminator="\n")


def write_field_csv(field: ValueField, path: PathLike) -> Path:
    """Columns x_1..x_d, value; one row per node in row-major order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = field.grid.flat_points()
    values = field.values.reshape(-1)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _writer(handle)
        writer.writerow([f"x_{i + 1}" for i in range(field.grid.dimension)] + ["value"])
        for point, value in zip(points, values):
            writer.writerow([fmt(c) for c in point] + [fmt(value)])
    return path


def read_field_csv(path: PathLike) -> ValueField:
    """Inverse of write_field_csv; the grid is recovered from the node coordinates."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    coords, values = data[:, :-1], data[:, -1]
    axes = [np.unique(coords[:, i]) for i in range(coords.shape[1])]
    grid = Grid(tuple(a[0] for a in axes), tuple(a[-1] for a in axes), tuple(len(a) for a in axes))
    if grid.size != len(values):
        raise InputError("CSV rows do not form a full rectangular grid", rows=len(values))
    return ValueField(grid, values.reshape(grid.shape))


def write_field_binary(field: ValueField, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = field.grid
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(np.array([grid.dimension], dtype="<u4").tobytes())
        handle.write(np.array(grid.nodes, dtype="<u4").tobytes())
        handle.write(np.array(grid.lower, dtype="<f8").tobytes())
        handle.write(np.array(grid.upper, dtype="<f8").tobytes())
        handle.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    return path


def read_field_binary(path: PathLike) -> ValueField:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise InputError("not a value-field file (bad magic)", path=str(path))
    d = int(np.frombuffer(raw, dtype="<u4", count=1, offset=8)[0])
    offset = 12
    header_len = offset + 4 * d + 16 * d
    if d < 1 or len(raw) < header_len:
        raise InputError("value-field header is truncated", path=str(path), dimension=d)
    nodes = np.frombuffer(raw, dtype="<u4", count=d, offset=offset)
    offset += 4 * d
    lower = np.frombuffer(raw, dtype="<f8", count=d, offset=offset)
    offset += 8 * d
    upper = np.frombuffer(raw, dtype="<f8", count=d, offset=offset)
    offset += 8 * d
    size = int(np.prod(nodes.astype(np.int64)))
    if len(raw) != header_len + 8 * size:
        raise InputError("value-field file has trailing or missing bytes", path=str(path),
                         expected=header_len + 8 * size, actual=len(raw))
    grid = Grid(tuple(lower), tuple(upper), tuple(int(n) for n in nodes))
    values = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
    return ValueField(grid, values.reshape(grid.shape).copy())


def write_trajectory_csv(traj: Trajectory, path: PathLike) -> Path:
    """Columns t, x_1..x_d, u_1..u_m, running_cost (the integrand L per node)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = traj.states.shape[-1]
    controls = traj.control_at_nodes()
    m = controls.shape[-1]
    integrand = traj.integrand if traj.integrand is not None else np.zeros(len(traj.times))
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _writer(handle)
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(d)] + [f"u_{i + 1}" for i in range(m)] + ["running_cost"])
        for k, t in enumerate(traj.times):
            writer.writerow([fmt(t)] + [fmt(v) for v in traj.states[k]] + [fmt(v) for v in controls[k]]
                            + [fmt(integrand[k])])
    return path


def write_table(rows: Iterable[Dict[str, object]], path: PathLike, columns: Optional[Sequence[str]] = None) -> Path:
    """Long-format CSV; columns default to the keys of the first row."""
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header: List[str] = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(row.get(key, "")) for key in header])
    return path


def write_summary(values: Dict[str, object], path: PathLike) -> Path:
    """key=value lines sorted by key."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={fmt(values[key])}" for key in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_summary(path: PathLike) -> Dict[str, str]:
    result = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            result[key] = value
    return result
