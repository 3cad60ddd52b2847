"""
Stability diagnostics for minimizers of the finite-horizon problem.

Policies are synthesized from the stored value history of the grid solver:
at time t_k the control minimizes dt L(x, u) + I[V^{n-k-1}](x + dt f(x, u)).
"""
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from app.config import get_settings
from app.exceptions import InputError
from app.services.ergodic import default_probes
from app.services.hjb import (
    BellmanOperator,
    Grid,
    SolverConfig,
    align_dt,
    default_dt,
    interpolate,
    march,
)
from app.services.lagrangian import LagrangianSpec, eval_lagrangian
from app.services.systems import ControlSystemSpec, eval_dynamics
from app.utils.logger import get_logger
from app.utils.metrics import track_duration

logger = get_logger(__name__)


class DiagnosticsReport(BaseModel):
    T: float
    R: float
    excursion_time: float       # M_R
    control_energy: float       # P_R
    trajectory_bound: float     # Q_R
    oscillation: float          # K(R)
    history_stride: int
    n_starts: int


class StabilityComparison(BaseModel):
    changes: Dict[str, float]
    tolerance: float
    passed: bool


def _history_stride(grid: Grid, n_steps: int, max_history_mb: float) -> int:
    field_bytes = grid.size * 8
    capacity = max(2, int(max_history_mb * 1024 * 1024 // field_bytes))
    return max(1, int(np.ceil((n_steps + 1) / capacity)))


def stability_diagnostics(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    grid: Grid,
    T: float,
    config: SolverConfig,
    R: float = 1.0,
    starts: Optional[Sequence[Sequence[float]]] = None,
    max_history_mb: Optional[float] = None,
) -> DiagnosticsReport:
    """
    Excursion time outside K, control energy int |u - u*|^2 and max |gamma|
    along synthesized minimizers from ``starts`` (default probes of B_R), and
    the oscillation of V_T over the grid nodes of B_R.
    """
    if T <= 0 or R <= 0:
        raise InputError("diagnostics need T > 0 and R > 0", T=T, R=R)
    cap = get_settings().max_history_mb if max_history_mb is None else max_history_mb
    dt = align_dt(default_dt(system, spec, grid, config), [T])
    n_steps = int(round(T / dt))
    stride = _history_stride(grid, n_steps, cap)

    with track_duration("diagnostics", "stability"):
        op = BellmanOperator(system, spec, grid, config, dt, direction=1)
        saved, history, _ = march(op, np.zeros(grid.shape), n_steps, checkpoints=[n_steps], history_stride=stride)
        V_T = saved[n_steps]

        ball = grid.ball_mask(R)
        oscillation = float(V_T[ball].max() - V_T[ball].min()) if np.any(ball) else 0.0

        x = np.atleast_2d(default_probes(R, grid.dimension) if starts is None else np.asarray(starts, dtype=float))
        controls = op.controls
        excursion = np.zeros(len(x))
        energy = np.zeros(len(x))
        bound = np.linalg.norm(x, axis=-1)
        for k in range(n_steps):
            remaining = n_steps - k - 1
            # nearest stored field at or below the remaining step count
            values = history[min(remaining // stride, len(history) - 1)]
            velocity = eval_dynamics(system, x[:, None, :], controls[None, :, :])
            foot = x[:, None, :] + dt * velocity
            candidates = dt * eval_lagrangian(spec, x[:, None, :], controls[None, :, :]) + interpolate(
                grid, values, foot, config.boundary)
            choice = np.argmin(candidates, axis=1)
            u = controls[choice]
            outside = np.linalg.norm(x, axis=-1) > spec.K_radius
            excursion += dt * outside
            energy += dt * np.sum((u - spec.u_star) ** 2, axis=-1)
            x = foot[np.arange(len(x)), choice]
            bound = np.maximum(bound, np.linalg.norm(x, axis=-1))

    report = DiagnosticsReport(
        T=T,
        R=R,
        excursion_time=float(excursion.max()),
        control_energy=float(energy.max()),
        trajectory_bound=float(bound.max()),
        oscillation=oscillation,
        history_stride=stride,
        n_starts=len(x),
    )
    logger.info("diagnostics.stability.done",
                extra={"operation": "stability_diagnostics", "horizon": T, "value": oscillation})
    return report


def compare_stability(reports: List[DiagnosticsReport], tolerance: float = 0.2,
                      floor: float = 1e-3) -> StabilityComparison:
    """Relative change of each measure between consecutive horizons."""
    if len(reports) < 2:
        raise InputError("need at least two diagnostics reports")
    keys = ("excursion_time", "control_energy", "trajectory_bound", "oscillation")
    changes: Dict[str, float] = {}
    for key in keys:
        worst = 0.0
        for a, b in zip(reports, reports[1:]):
            va, vb = getattr(a, key), getattr(b, key)
            worst = max(worst, abs(vb - va) / max(abs(va), floor))
        changes[key] = worst
    return StabilityComparison(changes=changes, tolerance=tolerance,
                               passed=all(v <= tolerance for v in changes.values()))
