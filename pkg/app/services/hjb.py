"""
Semi-Lagrangian grid solvers.

    finite horizon   V^{n+1}(x) = min_u { dt L(x,u) + I[V^n](x + dt f(x,u)) },  V^0 = 0
    discounted       v(x)       = min_u { w L(x,u) + e^{-lam dt} I[v](x + dt f(x,u)) }
    Lax-Oleinik      phi^{n+1}  = min_u { dt L(x,u) + I[phi^n](x - dt f(x,u)) }

I[.] is multilinear interpolation on a rectangular grid. Foot points leaving
the box use the configured boundary rule: ``extend_linear`` (one ghost layer
of linear extrapolation, constant beyond) or ``clamp`` (nearest boundary value).
Ties in the min over the control mesh go to the lowest mesh index.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from math import gcd
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.ndimage import map_coordinates

from app.exceptions import DivergenceError, InputError, IterationLimitError
from app.services.lagrangian import LagrangianSpec, closed_form_available, eval_lagrangian, hamiltonian
from app.services.systems import ControlSystemSpec, eval_dynamics
from app.utils.logger import get_logger
from app.utils.metrics import inc, track_duration

logger = get_logger(__name__)

BOUNDARY_RULES = ("extend_linear", "clamp")
MAX_GRID_DIMENSION = 3
BOUNDARY_HIT_WARNING = 0.01


# ---------------------------------------------------------------------------
# Grid and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    nodes: Tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        nodes = tuple(int(n) for n in self.nodes)
        if not (len(lower) == len(upper) == len(nodes)) or not lower:
            raise InputError("grid corners and node counts must have the same positive length")
        if len(nodes) > MAX_GRID_DIMENSION:
            raise InputError(f"grids are limited to d <= {MAX_GRID_DIMENSION}", dimension=len(nodes))
        if any(n < 3 for n in nodes):
            raise InputError("grid needs at least 3 nodes per axis", nodes=list(nodes))
        if any(u <= l for l, u in zip(lower, upper)):
            raise InputError("grid upper corner must exceed the lower corner", lower=list(lower), upper=list(upper))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def cube(cls, half_width: float, nodes: int, dimension: int) -> "Grid":
        return cls((-half_width,) * dimension, (half_width,) * dimension, (nodes,) * dimension)

    @property
    def dimension(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.nodes) - 1)

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(l, u, n) for l, u, n in zip(self.lower, self.upper, self.nodes)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape nodes + (d,)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def flat_points(self) -> np.ndarray:
        return self.points().reshape(-1, self.dimension)

    def contains(self, x, margin: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= np.array(self.lower) - margin) & (x <= np.array(self.upper) + margin), axis=-1)

    def nearest_index(self, x) -> Tuple[int, ...]:
        x = np.asarray(x, dtype=float)
        idx = np.rint((x - np.array(self.lower)) / self.spacing).astype(int)
        return tuple(int(i) for i in np.clip(idx, 0, np.array(self.nodes) - 1))

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[tuple(slice(1, -1) for _ in self.nodes)] = True
        return mask

    def ball_mask(self, radius: float) -> np.ndarray:
        return np.linalg.norm(self.points(), axis=-1) <= radius + 1e-12


@dataclass
class ValueField:
    """Scalar values on the nodes of a grid, evaluated off-grid by multilinear interpolation."""

    grid: Grid
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise InputError("field values do not match the grid shape",
                             expected=list(self.grid.shape), got=list(values.shape))
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise DivergenceError("value field has non-finite entries", node=bad)
        self.values = values

    def __call__(self, points, boundary: str = "extend_linear") -> np.ndarray:
        return interpolate(self.grid, self.values, points, boundary)

    def __add__(self, c: float) -> "ValueField":
        return ValueField(self.grid, self.values + float(c), dict(self.meta))

    def __sub__(self, other: "ValueField") -> "ValueField":
        if other.grid != self.grid:
            raise InputError("fields live on different grids")
        return ValueField(self.grid, self.values - other.values)

    def sup_distance(self, other: "ValueField") -> float:
        return float(np.max(np.abs(self.values - other.values)))

    def at_node(self, x) -> float:
        return float(self.values[self.grid.nearest_index(x)])

    @classmethod
    def constant(cls, grid: Grid, value: float = 0.0) -> "ValueField":
        return cls(grid, np.full(grid.shape, float(value)))


def _check_boundary(boundary: str) -> None:
    if boundary not in BOUNDARY_RULES:
        raise InputError(f"unknown boundary rule {boundary!r}; expected one of {BOUNDARY_RULES}")


def _padded(values: np.ndarray, boundary: str) -> Tuple[np.ndarray, float]:
    if boundary == "extend_linear":
        # odd reflection puts 2 v_0 - v_1 in the ghost layer
        return np.pad(values, 1, mode="reflect", reflect_type="odd"), 1.0
    return values, 0.0


def grid_coordinates(grid: Grid, points: np.ndarray) -> np.ndarray:
    """Fractional node index per axis, moved to the leading axis: (d, ...)."""
    coords = (np.asarray(points, dtype=float) - np.array(grid.lower)) / grid.spacing
    return np.moveaxis(coords, -1, 0)


def interpolate(grid: Grid, values: np.ndarray, points, boundary: str = "extend_linear") -> np.ndarray:
    _check_boundary(boundary)
    points = np.asarray(points, dtype=float)
    if points.shape[-1:] != (grid.dimension,):
        raise InputError("points must have the grid dimension", expected=grid.dimension)
    table, shift = _padded(values, boundary)
    coords = grid_coordinates(grid, points) + shift
    flat = coords.reshape(grid.dimension, -1)
    out = map_coordinates(table, flat, order=1, mode="nearest", prefilter=False)
    return out.reshape(points.shape[:-1])


# ---------------------------------------------------------------------------
# Solver configuration and the shared Bellman update
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    """dt=None picks 0.5 * min spacing / max |f| over grid nodes and control mesh."""

    dt: Optional[float] = None
    control_radius: float = 3.0
    control_points: int = 21
    boundary: str = "extend_linear"
    tolerance: float = 1e-6
    max_iterations: int = 200000
    threads: int = 1

    def __post_init__(self):
        if self.dt is not None and self.dt <= 0:
            raise InputError("dt must be positive", dt=self.dt)
        if self.tolerance <= 0:
            raise InputError("tolerance must be positive", tolerance=self.tolerance)
        if self.control_radius <= 0 or self.control_points < 2:
            raise InputError("control mesh needs a positive radius and at least 2 points per axis")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be positive")
        _check_boundary(self.boundary)


def control_mesh(spec: LagrangianSpec, config: SolverConfig) -> np.ndarray:
    """Uniform points of the ball of radius control_radius in R^m, with u* appended when absent."""
    m = spec.control_dimension
    axis = np.linspace(-config.control_radius, config.control_radius, config.control_points)
    box = np.stack([g.ravel() for g in np.meshgrid(*([axis] * m), indexing="ij")], axis=-1)
    mesh = box[np.linalg.norm(box, axis=-1) <= config.control_radius * (1.0 + 1e-12)]
    if not np.any(np.all(np.isclose(mesh, spec.u_star, rtol=0.0, atol=1e-12), axis=-1)):
        mesh = np.vstack([mesh, spec.u_star[None, :]])
    return mesh


def default_dt(system: ControlSystemSpec, spec: LagrangianSpec, grid: Grid, config: SolverConfig) -> float:
    if config.dt is not None:
        return float(config.dt)
    nodes = grid.flat_points()
    controls = control_mesh(spec, config)
    speed = np.linalg.norm(eval_dynamics(system, nodes[:, None, :], controls[None, :, :]), axis=-1).max()
    h = float(np.min(grid.spacing))
    return 0.5 * h / speed if speed > 0 else 0.5 * h


def align_dt(dt: float, times: Sequence[float]) -> float:
    """Largest step <= dt dividing every time in ``times``."""
    fractions = [Fraction(t).limit_denominator(10 ** 6) for t in times if t > 0]
    if not fractions:
        return dt
    denominator = reduce(lambda a, b: a * b // gcd(a, b), (f.denominator for f in fractions))
    common = Fraction(reduce(gcd, (int(f * denominator) for f in fractions)), denominator)
    steps = int(np.ceil(float(common) / dt - 1e-9))
    aligned = float(common) / steps
    if abs(aligned - dt) > 1e-12 * dt:
        logger.warning("hjb.dt.adjusted", extra={"operation": "align_dt", "value": aligned, "step": steps})
    return aligned


class BellmanOperator:
    """
    One dynamic-programming update on a fixed grid and control mesh.

    Running costs and foot-point coordinates are precomputed; ``apply`` only
    interpolates and minimizes. direction=+1 uses x + dt f, -1 uses x - dt f.
    """

    def __init__(
        self,
        system: ControlSystemSpec,
        spec: LagrangianSpec,
        grid: Grid,
        config: SolverConfig,
        dt: float,
        direction: int = 1,
        discount: float = 1.0,
        cost_weight: Optional[float] = None,
        controls: Optional[np.ndarray] = None,
    ):
        if system.dimension != grid.dimension or spec.dimension != grid.dimension:
            raise InputError("system, Lagrangian and grid dimensions differ",
                             system=system.dimension, lagrangian=spec.dimension, grid=grid.dimension)
        if system.control_dimension != spec.control_dimension:
            raise InputError("system and Lagrangian control dimensions differ")
        self.grid = grid
        self.config = config
        self.dt = dt
        self.discount = discount
        self.controls = control_mesh(spec, config) if controls is None else np.asarray(controls, dtype=float)
        nodes = grid.flat_points()[:, None, :]
        weight = dt if cost_weight is None else cost_weight
        self.cost = weight * eval_lagrangian(spec, nodes, self.controls[None, :, :])
        foot = nodes + direction * dt * eval_dynamics(system, nodes, self.controls[None, :, :])
        self.outside = ~grid.contains(foot)
        self.coords = grid_coordinates(grid, foot)  # (d, n_nodes, n_controls)

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    def _chunk(self, table: np.ndarray, shift: float, rows: slice) -> Tuple[np.ndarray, np.ndarray]:
        coords = self.coords[:, rows, :] + shift
        n_rows = coords.shape[1]
        interp = map_coordinates(table, coords.reshape(self.grid.dimension, -1),
                                 order=1, mode="nearest", prefilter=False).reshape(n_rows, -1)
        candidates = self.cost[rows] + self.discount * interp
        arg = np.argmin(candidates, axis=1)
        return np.take_along_axis(candidates, arg[:, None], axis=1)[:, 0], arg

    def apply(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """New nodal values and the argmin control index per node."""
        table, shift = _padded(values, self.config.boundary)
        n = self.grid.size
        threads = max(1, min(self.config.threads, n))
        if threads == 1:
            best, arg = self._chunk(table, shift, slice(0, n))
        else:
            bounds = np.linspace(0, n, threads + 1).astype(int)
            rows = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda r: self._chunk(table, shift, r), rows))
            best = np.concatenate([p[0] for p in parts])
            arg = np.concatenate([p[1] for p in parts])
        return best.reshape(self.grid.shape), arg.reshape(self.grid.shape)

    def boundary_fraction(self, arg: np.ndarray) -> float:
        """Share of nodes whose minimizing control has its foot point outside the box."""
        chosen = np.take_along_axis(self.outside, arg.reshape(-1, 1), axis=1)[:, 0]
        return float(np.mean(chosen))


def _check_finite(values: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(values)):
        node = int(np.flatnonzero(~np.isfinite(values))[0])
        raise DivergenceError("non-finite value in grid solver", step=step, node=node)


def _report_boundary(op: BellmanOperator, arg: np.ndarray, operation: str) -> float:
    fraction = op.boundary_fraction(arg)
    if fraction > BOUNDARY_HIT_WARNING:
        logger.warning("hjb.boundary.minimizers_outside",
                       extra={"operation": operation, "value": round(fraction, 6)})
    return fraction


def bellman_step(op: BellmanOperator, field_: ValueField) -> ValueField:
    """
    One update of ``op``. A forward-foot operator (direction=+1) advances V_T to
    V_{T+dt}; a backward-foot one (direction=-1) applies T_dt.
    """
    values, arg = op.apply(field_.values)
    return ValueField(op.grid, values, {"argmin": arg, "dt": op.dt})


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def march(
    op: BellmanOperator,
    initial: np.ndarray,
    n_steps: int,
    checkpoints: Sequence[int] = (),
    history_stride: int = 0,
) -> Tuple[Dict[int, np.ndarray], List[np.ndarray], Optional[np.ndarray]]:
    """
    Apply ``op`` n_steps times. Returns values at checkpoint step counts, the
    stored history (every history_stride-th step, step 0 included) and the
    last argmin.
    """
    values = np.array(initial, dtype=float)
    wanted = set(checkpoints)
    saved: Dict[int, np.ndarray] = {0: values.copy()} if 0 in wanted else {}
    history: List[np.ndarray] = [values.copy()] if history_stride else []
    arg = None
    for n in range(1, n_steps + 1):
        values, arg = op.apply(values)
        _check_finite(values, n)
        if n in wanted:
            saved[n] = values.copy()
        if history_stride and n % history_stride == 0:
            history.append(values.copy())
    inc("hjb.sweeps", n_steps)
    return saved, history, arg


def solve_finite_horizon(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    grid: Grid,
    T: float,
    config: SolverConfig,
    checkpoints: Optional[Sequence[float]] = None,
) -> List[ValueField]:
    """
    V_T on the grid from V^0 = 0, returned at each checkpoint (default [T]).
    dt is reduced when needed so every checkpoint is a multiple of it.
    """
    if T <= 0:
        raise InputError("horizon must be positive", horizon=T)
    times = sorted(set(float(t) for t in (checkpoints or [T])))
    if times[0] <= 0 or times[-1] > T + 1e-12:
        raise InputError("checkpoints must lie in (0, T]", checkpoints=times)
    dt = align_dt(default_dt(system, spec, grid, config), times + [T])
    steps = [int(round(t / dt)) for t in times]

    with track_duration("hjb", "finite_horizon"):
        op = BellmanOperator(system, spec, grid, config, dt, direction=1)
        saved, _, arg = march(op, np.zeros(grid.shape), max(steps), checkpoints=steps)

    fraction = _report_boundary(op, arg, "solve_finite_horizon")
    logger.info("hjb.finite_horizon.done",
                extra={"operation": "solve_finite_horizon", "horizon": T, "step": max(steps), "value": dt})
    return [
        ValueField(grid, saved[n], {"time": t, "dt": dt, "steps": n, "boundary_fraction": fraction})
        for t, n in zip(times, steps)
    ]


def solve_discounted(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    grid: Grid,
    lam: float,
    config: SolverConfig,
    initial: Optional[ValueField] = None,
) -> ValueField:
    """
    Fixed point of the discounted update, stopping when the sup-change drops
    below tolerance * (1 - e^{-lam dt}). Each step weights L by
    (1 - e^{-lam dt}) / lam, the exact discount integral over one step.
    """
    if lam <= 0:
        raise InputError("discount rate must be positive", lam=lam)
    dt = default_dt(system, spec, grid, config)
    factor = float(np.exp(-lam * dt))
    stop = config.tolerance * (1.0 - factor)

    with track_duration("hjb", "discounted"):
        op = BellmanOperator(system, spec, grid, config, dt, direction=1,
                             discount=factor, cost_weight=-np.expm1(-lam * dt) / lam)
        values = np.zeros(grid.shape) if initial is None else np.array(initial.values, dtype=float)
        change = np.inf
        arg = None
        for n in range(1, config.max_iterations + 1):
            new, arg = op.apply(values)
            _check_finite(new, n)
            change = float(np.max(np.abs(new - values)))
            values = new
            if change < stop:
                break
        else:
            raise IterationLimitError("discounted value iteration did not converge",
                                      iterations=config.max_iterations, residual=change)
    inc("hjb.sweeps", n)

    fraction = _report_boundary(op, arg, "solve_discounted")
    logger.info("hjb.discounted.done",
                extra={"operation": "solve_discounted", "lam": lam, "iterations": n, "residual": change})
    return ValueField(grid, values, {"lam": lam, "dt": dt, "iterations": n, "residual": change,
                                     "boundary_fraction": fraction})


def lax_oleinik_apply(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    phi: ValueField,
    t: float,
    config: SolverConfig,
) -> ValueField:
    """T_t phi by t/dt backward-foot updates; t = 0 returns phi unchanged."""
    if t < 0:
        raise InputError("semigroup time must be nonnegative", t=t)
    if t == 0:
        return ValueField(phi.grid, phi.values.copy(), {"time": 0.0})
    if not system.is_driftless:
        logger.warning("hjb.lax_oleinik.not_driftless", extra={"operation": "lax_oleinik_apply"})
    dt = align_dt(default_dt(system, spec, phi.grid, config), [t])
    n_steps = int(round(t / dt))
    op = BellmanOperator(system, spec, phi.grid, config, dt, direction=-1)
    saved, _, _ = march(op, phi.values, n_steps, checkpoints=[n_steps])
    return ValueField(phi.grid, saved[n_steps], {"time": t, "dt": dt, "steps": n_steps})


class ResidualReport(BaseModel):
    residual: float
    hamiltonian_residual: Optional[float] = None
    dt: float
    worst_node: List[int]


def scheme_residual(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    field_: ValueField,
    config: SolverConfig,
) -> Tuple[ResidualReport, ValueField]:
    """
    sup over interior nodes of |phi - T_dt phi| / dt, plus the per-node field.
    |H(x, D phi)| on central differences is reported when H has a closed form.
    """
    grid = field_.grid
    dt = default_dt(system, spec, grid, config)
    op = BellmanOperator(system, spec, grid, config, dt, direction=-1)
    stepped = bellman_step(op, field_)
    per_node = np.abs(field_.values - stepped.values) / dt
    interior = grid.interior_mask()
    masked = np.where(interior, per_node, 0.0)
    worst = np.unravel_index(int(np.argmax(masked)), grid.shape)

    h_residual = None
    if closed_form_available(spec, system):
        parts = np.gradient(field_.values, *grid.spacing, edge_order=2)
        if grid.dimension == 1:
            parts = [parts]
        gradient = np.stack(parts, axis=-1)
        H = hamiltonian(spec, system, grid.points(), gradient, mode="closed_form")
        h_residual = float(np.max(np.abs(H[interior])))

    report = ResidualReport(
        residual=float(masked.max()),
        hamiltonian_residual=h_residual,
        dt=dt,
        worst_node=[int(i) for i in worst],
    )
    return report, ValueField(grid, masked, {"dt": dt})
