"""
Built-in scenarios, usable with --benchmark NAME instead of a config file.
"""
import copy
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

from app.exceptions import InputError


@dataclass(frozen=True)
class Benchmark:
    name: str
    anchor: str
    description: str
    payload: Dict[str, Any] = field(default_factory=dict)


BENCHMARKS: Dict[str, Benchmark] = {
    "grushin-quadratic": Benchmark(
        name="grushin-quadratic",
        anchor="driftless, step 2 on the singular line x = 0; Grushin plane with attractor potential |x|^2",
        description="x' = u, y' = x v with L = 1/2|u|^2 + x^2 + y^2",
        payload={
            "system": {"kind": "grushin", "phi": "x"},
            "lagrangian": {"kind": "quadratic_plus_potential", "g": "x^2 + y^2", "ell1": 6.0, "theta": 0.5,
                           "K_radius": 1.0, "beta": "1 + r^2", "normalized": True},
            "grid": {"lower": [-2.0, -2.0], "upper": [2.0, 2.0], "nodes": 161},
            "solver": {"dt": 0.01},
            "params": {"T": 20.0, "R": 1.0, "sample_box": [[-2.0, -2.0], [2.0, 2.0]]},
        },
    ),
    "heisenberg-quadratic": Benchmark(
        name="heisenberg-quadratic",
        anchor="driftless, step 2 everywhere; Heisenberg group with attractor potential |x|^2",
        description="x' = u, y' = v, z' = u y - v x with L = 1/2|u|^2 + x^2 + y^2 + z^2",
        payload={
            "system": {"kind": "heisenberg"},
            "lagrangian": {"kind": "quadratic_plus_potential", "g": "x^2 + y^2 + z^2", "ell1": 6.0,
                           "theta": 0.5, "K_radius": 1.0, "beta": "1 + r^2", "normalized": True},
            "grid": {"lower": [-1.5, -1.5, -1.5], "upper": [1.5, 1.5, 1.5], "nodes": 31},
            "solver": {"dt": 0.02},
            "params": {"T": 5.0, "R": 1.0, "sample_box": [[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]],
                       "from_point": [0.0, 0.0, 0.0], "to_point": [0.0, 0.0, 0.4]},
        },
    ),
    "euclidean-sanity": Benchmark(
        name="euclidean-sanity",
        anchor="driftless, step 1; flat metric sanity check",
        description="x' = u in R^2 with L = 1/2|u|^2 + |x|^2",
        payload={
            "system": {"kind": "euclidean", "dimension": 2},
            "lagrangian": {"kind": "quadratic_plus_potential", "g": "x^2 + y^2", "ell1": 6.0, "theta": 0.5,
                           "K_radius": 1.0, "beta": "1 + r^2", "normalized": True},
            "grid": {"lower": [-2.0, -2.0], "upper": [2.0, 2.0], "nodes": 81},
            "params": {"T": 5.0, "R": 1.0, "sample_box": [[-2.0, -2.0], [2.0, 2.0]],
                       "from_point": [0.0, 0.0], "to_point": [3.0, 4.0]},
        },
    ),
    "double-integrator": Benchmark(
        name="double-integrator",
        anchor="linear, nilpotent A, Kalman rank 2; control of acceleration",
        description="x' = v, v' = u with L = 1/2 u^2 + 1/2 v^2 + x^2, u* = 0",
        payload={
            "system": {"kind": "double_integrator"},
            "lagrangian": {"kind": "quadratic_plus_potential", "g": "x^2 + 0.5*y^2", "ell1": 6.0,
                           "theta": 0.4, "K_radius": 1.0, "beta": "1 + r^2", "normalized": True},
            "grid": {"lower": [-2.0, -2.0], "upper": [2.0, 2.0], "nodes": 81},
            "params": {"T": 5.0, "R": 1.0, "sample_box": [[-2.0, -2.0], [2.0, 2.0]]},
        },
    ),
    "harmonic-oscillator": Benchmark(
        name="harmonic-oscillator",
        anchor="linear, rotation A, Kalman rank 2; oscillator with shifted rest point x* = (0.5, 0)",
        description="x' = v, v' = -x + u with L = 1/2|u - x*|^2 + 1/2 v^2 + (x - x*)^2, u* = x* = 0.5",
        payload={
            "system": {"kind": "harmonic_oscillator", "x_star": 0.5},
            "lagrangian": {"kind": "quadratic_plus_potential", "g": "(x - 0.5)^2 + 0.5*y^2", "u_star": [0.5],
                           "x_star": [0.5, 0.0], "ell1": 6.0, "theta": 0.2, "K_radius": 1.0,
                           "beta": "1 + 2*r^2"},
            "grid": {"lower": [-2.0, -2.0], "upper": [2.0, 2.0], "nodes": 81},
            "params": {"T": 5.0, "R": 1.0, "sample_box": [[-2.0, -2.0], [2.0, 2.0]]},
        },
    ),
}


def list_benchmarks() -> List[Tuple[str, str]]:
    """(name, anchor) pairs sorted by name."""
    return [(name, BENCHMARKS[name].anchor) for name in sorted(BENCHMARKS)]


def benchmark_config(name: str, task: str) -> Dict[str, Any]:
    """A config mapping for ``task`` on the named scenario."""
    if name not in BENCHMARKS:
        raise InputError(f"Unknown benchmark: {name}. Available: {sorted(BENCHMARKS)}")
    data = copy.deepcopy(BENCHMARKS[name].payload)
    data.update(schema_version=1, name=name, task=task)
    return data
