"""
Sub-Riemannian geometry of driftless systems: energy, distance, grid distance
fields, the ball-box comparison with the Euclidean metric, and (LUGC) budgets.

e_SR(x, y) is the least int_0^1 |u|^2 over controls steering x to y; d_SR is
its square root. Both are estimated by penalty-continuation direct
optimization, so they are upper bounds up to the endpoint residual.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.linalg import expm

from app.exceptions import InputError, IterationLimitError, NonConvergenceError
from app.services.hjb import BellmanOperator, Grid, SolverConfig, ValueField
from app.services.lagrangian import LagrangianSpec, constant_lagrangian, generic_lagrangian
from app.services.systems import ControlSystemSpec, check_chow, controllability_gramian, eval_dynamics
from app.services.trajectory import OptimizerConfig, Trajectory, direct_minimize
from app.utils.logger import get_logger
from app.utils.metrics import inc, track_duration

logger = get_logger(__name__)

BIG = 1e6


@dataclass(frozen=True)
class SROptions:
    N: int = 32
    restarts: int = 8
    seed: int = 0
    mu: float = 1e3
    horizon: float = 1.0
    tolerance: float = 1e-3
    threads: int = 1


class BallBoxReport(BaseModel):
    compact_radius: float
    degree: int
    c1: float
    c2: float
    fitted_exponent: float
    worst_violation: float
    n_pairs: int
    distances: List[float]
    euclidean: List[float]


class LUGCReport(BaseModel):
    method: str
    T_R: float
    C_R: float
    radius: float
    n_pairs: int


def _require_driftless(system: ControlSystemSpec, operation: str) -> None:
    if not system.is_driftless:
        raise InputError(f"{operation} needs a driftless control-affine system", kind=system.kind)


def energy_lagrangian(system: ControlSystemSpec) -> LagrangianSpec:
    """L(x, u) = |u|^2."""
    def squared_speed(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.sum(u ** 2, axis=-1)

    return generic_lagrangian(squared_speed, system.dimension, system.control_dimension, ell1=0.5,
                              name="energy")


def sr_geodesic(system: ControlSystemSpec, x, y, options: Optional[SROptions] = None) -> Tuple[float, Trajectory]:
    """Energy on the horizon ``options.horizon`` and the optimizing trajectory."""
    opts = options or SROptions()
    _require_driftless(system, "sr_energy")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (system.dimension,) or y.shape != (system.dimension,):
        raise InputError("endpoints must have the system dimension", expected=system.dimension)
    if opts.horizon <= 0:
        raise InputError("horizon must be positive", horizon=opts.horizon)

    with track_duration("srgeometry", "energy"):
        traj, energy = direct_minimize(
            system,
            energy_lagrangian(system),
            x,
            opts.horizon,
            opts.N,
            endpoint=(y, opts.mu),
            restarts=opts.restarts,
            seed=opts.seed,
            threads=opts.threads,
            options=OptimizerConfig(restarts=opts.restarts),
        )
    residual = traj.info["endpoint_residual"]
    if residual > opts.tolerance:
        raise NonConvergenceError("endpoint not reached after penalty continuation", residual=residual)
    logger.debug("srgeometry.energy.converged",
                 extra={"operation": "sr_energy", "value": energy, "residual": residual, "seed": opts.seed})
    return energy, traj


def sr_energy(system: ControlSystemSpec, x, y, N: int = 32, restarts: int = 8, seed: int = 0,
              horizon: float = 1.0, options: Optional[SROptions] = None) -> float:
    """
    Least energy int_0^t |u|^2 joining x to y on the horizon t (default 1).
    Time rescaling gives t * e_t(x, y) = e_1(x, y).
    """
    opts = options or SROptions(N=N, restarts=restarts, seed=seed, horizon=horizon)
    if np.array_equal(np.asarray(x, dtype=float), np.asarray(y, dtype=float)):
        _require_driftless(system, "sr_energy")
        return 0.0
    energy, _ = sr_geodesic(system, x, y, opts)
    return energy


def sr_distance(system: ControlSystemSpec, x, y, options: Optional[SROptions] = None) -> float:
    """d_SR(x, y) = sqrt(e_SR(x, y)) on the unit horizon."""
    opts = options or SROptions()
    if opts.horizon != 1.0:
        raise InputError("sr_distance uses the unit horizon", horizon=opts.horizon)
    return float(np.sqrt(sr_energy(system, x, y, options=opts)))


# ---------------------------------------------------------------------------
# Grid distance field
# ---------------------------------------------------------------------------

def unit_directions(m: int, count: int = 32) -> np.ndarray:
    """A mesh of the unit sphere of R^m."""
    if m == 1:
        return np.array([[1.0], [-1.0]])
    if m == 2:
        angles = 2.0 * np.pi * np.arange(count) / count
        return np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    if m == 3:
        # Fibonacci sphere
        k = np.arange(2 * count) + 0.5
        polar = np.arccos(1.0 - 2.0 * k / (2 * count))
        azimuth = np.pi * (1.0 + 5.0 ** 0.5) * k
        return np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=-1)
    raise InputError("direction meshes are available for m <= 3", m=m)


def sr_distance_field(
    system: ControlSystemSpec,
    x0,
    grid: Grid,
    directions: int = 32,
    tolerance: float = 1e-6,
    max_sweeps: int = 20000,
    threads: int = 1,
) -> ValueField:
    """
    Minimum time with |u| <= 1 from x0, by Jacobi value iteration of
    d(x) = min(d(x), min_u { s + I[d](x + s f(x, u)) }) with d(x0) = 0.
    """
    _require_driftless(system, "sr_distance_field")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (grid.dimension,):
        raise InputError("source must have the grid dimension", expected=grid.dimension)
    if not grid.contains(x0):
        raise InputError("source lies outside the grid", source=x0.tolist())
    source = grid.nearest_index(x0)
    node = np.array(grid.lower) + np.array(source) * grid.spacing
    if not np.allclose(node, x0, atol=1e-9):
        logger.warning("srgeometry.field.source_not_a_node",
                       extra={"operation": "sr_distance_field", "node": list(source)})

    controls = unit_directions(system.control_dimension, directions)
    config = SolverConfig(boundary="clamp", threads=threads)
    step = _field_step(system, grid, controls)
    op = BellmanOperator(system, constant_lagrangian(1.0, system.dimension, system.control_dimension),
                         grid, config, step, direction=1, controls=controls)

    values = np.full(grid.shape, BIG)
    values[source] = 0.0
    change = np.inf
    with track_duration("srgeometry", "distance_field"):
        for sweep in range(1, max_sweeps + 1):
            update, _ = op.apply(values)
            new = np.minimum(values, update)
            new[source] = 0.0
            change = float(np.max(np.abs(new - values)))
            values = new
            if change < tolerance:
                break
        else:
            raise IterationLimitError("distance field did not converge", iterations=max_sweeps, residual=change)
    inc("srgeometry.field_sweeps", sweep)
    logger.info("srgeometry.field.done", extra={"operation": "sr_distance_field", "iterations": sweep})
    return ValueField(grid, values, {"source": list(source), "step": step, "sweeps": sweep})


def _field_step(system: ControlSystemSpec, grid: Grid, controls: np.ndarray) -> float:
    nodes = grid.flat_points()[:, None, :]
    speed = np.linalg.norm(eval_dynamics(system, nodes, controls[None, :, :]), axis=-1).max()
    h = float(np.min(grid.spacing))
    return 0.5 * h / speed if speed > 0 else 0.5 * h


# ---------------------------------------------------------------------------
# Ball-box audit
# ---------------------------------------------------------------------------

def sample_ball(rng: np.random.Generator, radius: float, dimension: int, count: int) -> np.ndarray:
    """Uniform samples of the closed ball B_R."""
    direction = rng.standard_normal((count, dimension))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    return radius * rng.uniform(size=(count, 1)) ** (1.0 / dimension) * direction


def nonholonomy_degree(system: ControlSystemSpec, R: float, n_points: int = 50, seed: int = 0) -> int:
    """Max Chow degree over points sampled in B_R."""
    rng = np.random.default_rng(seed)
    points = sample_ball(rng, R, system.dimension, n_points)
    return max(check_chow(system, p).degree for p in points)


def _pairwise(system, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], options: SROptions) -> List[float]:
    def one(index: int) -> float:
        x, y = pairs[index]
        return sr_distance(system, x, y, SROptions(
            N=options.N, restarts=options.restarts, seed=options.seed + index,
            mu=options.mu, tolerance=options.tolerance,
        ))

    if options.threads > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            return list(pool.map(one, range(len(pairs))))
    return [one(i) for i in range(len(pairs))]


def ball_box_audit(
    system: ControlSystemSpec,
    R: float,
    n_pairs: int = 64,
    seed: int = 0,
    options: Optional[SROptions] = None,
    direction: Optional[Sequence[float]] = None,
    holdout_fraction: float = 0.0,
) -> BallBoxReport:
    """
    Fit c1 |x - y| <= d_SR(x, y) <= c2 |x - y|^{1/r} on pairs sampled in B_R.

    With ``direction`` each pair is (x, x + s e) with s log-uniform in
    [R/20, R]. With ``holdout_fraction`` > 0 the constants are fitted on the
    leading pairs and the violation is measured on the rest.
    """
    _require_driftless(system, "ball_box_audit")
    if R <= 0 or n_pairs < 2:
        raise InputError("ball-box audit needs R > 0 and at least 2 pairs", R=R, n_pairs=n_pairs)
    if not 0.0 <= holdout_fraction < 1.0:
        raise InputError("holdout_fraction must lie in [0, 1)", holdout_fraction=holdout_fraction)
    opts = options or SROptions(seed=seed)
    rng = np.random.default_rng(seed)
    degree = nonholonomy_degree(system, R, seed=seed)

    if direction is not None:
        e = np.asarray(direction, dtype=float)
        e = e / np.linalg.norm(e)
        starts = sample_ball(rng, R / 2.0, system.dimension, n_pairs)
        lengths = np.exp(rng.uniform(np.log(R / 20.0), np.log(R), size=n_pairs))
        ends = starts + lengths[:, None] * e
    else:
        starts = sample_ball(rng, R, system.dimension, n_pairs)
        ends = sample_ball(rng, R, system.dimension, n_pairs)
    pairs = list(zip(starts, ends))

    with track_duration("srgeometry", "ball_box"):
        distances = np.array(_pairwise(system, pairs, opts))
    euclid = np.linalg.norm(ends - starts, axis=-1)

    n_fit = n_pairs - int(round(holdout_fraction * n_pairs))
    fit = slice(0, max(2, n_fit))
    exponent = float(np.polyfit(np.log(euclid[fit]), np.log(distances[fit]), 1)[0])
    c1 = float(np.min(distances[fit] / euclid[fit]))
    c2 = float(np.max(distances[fit] / euclid[fit] ** (1.0 / degree)))
    violation = np.maximum(c1 * euclid - distances, distances - c2 * euclid ** (1.0 / degree))

    report = BallBoxReport(
        compact_radius=R,
        degree=degree,
        c1=c1,
        c2=c2,
        fitted_exponent=exponent,
        worst_violation=float(np.max(violation)),
        n_pairs=n_pairs,
        distances=distances.tolist(),
        euclidean=euclid.tolist(),
    )
    logger.info("srgeometry.ball_box.done",
                extra={"operation": "ball_box_audit", "value": exponent, "count": n_pairs, "seed": seed})
    return report


def lugc_audit(
    system: ControlSystemSpec,
    R: float,
    T: float = 1.0,
    n_pairs: int = 16,
    seed: int = 0,
    options: Optional[SROptions] = None,
) -> LUGCReport:
    """
    Sampled (LUGC) budget C_R: the largest least energy int_0^T |u|^2 joining
    pairs of B_R. Closed form through the Gramian for linear systems; the SR
    energy on the unit horizon for driftless ones.
    """
    rng = np.random.default_rng(seed)
    starts = sample_ball(rng, R, system.dimension, n_pairs)
    ends = sample_ball(rng, R, system.dimension, n_pairs)

    if system.kind == "linear":
        gramian = controllability_gramian(system.A, system.B, T)
        flow = expm(T * system.A)
        gaps = ends - starts @ flow.T
        energies = np.einsum("ni,ni->n", gaps, np.linalg.solve(gramian, gaps.T).T)
        return LUGCReport(method="gramian", T_R=T, C_R=float(energies.max()), radius=R, n_pairs=n_pairs)

    _require_driftless(system, "lugc_audit")
    opts = options or SROptions(seed=seed)
    energies = np.array(_pairwise(system, list(zip(starts, ends)), opts)) ** 2
    return LUGCReport(method="sr_energy", T_R=1.0, C_R=float(energies.max()), radius=R, n_pairs=n_pairs)
