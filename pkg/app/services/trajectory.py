"""
Controlled trajectories: RK4 integration with piecewise-constant controls,
cost evaluation and direct open-loop optimization over control sequences.

Rollouts are batched: states have shape (..., N+1, d) and controls
(..., N, m), so many candidate control sequences integrate in one pass.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy.integrate import simpson, trapezoid
from scipy.optimize import minimize

from app.exceptions import DivergenceError, InputError
from app.services.lagrangian import LagrangianSpec, eval_lagrangian
from app.services.systems import ControlSystemSpec, eval_dynamics
from app.utils.logger import get_logger
from app.utils.metrics import inc, track_duration

logger = get_logger(__name__)

ControlSignal = Union[np.ndarray, Sequence[float], Callable[[float], np.ndarray]]


@dataclass
class Trajectory:
    """Sampled trajectory-control pair; ``control[k]`` acts on [times[k], times[k+1])."""

    times: np.ndarray
    states: np.ndarray
    control: np.ndarray
    cost: float = 0.0
    integrand: Optional[np.ndarray] = None
    info: Dict[str, Any] = field(default_factory=dict)

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def n_intervals(self) -> int:
        return len(self.times) - 1

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def control_at_nodes(self) -> np.ndarray:
        """Control per node; the last node repeats the last interval's control."""
        return np.concatenate([self.control, self.control[-1:]], axis=0)


def uniform_grid(T: float, N: int) -> np.ndarray:
    if T <= 0:
        raise InputError("horizon must be positive", horizon=T)
    if N < 1:
        raise InputError("need at least one control interval", N=N)
    return np.linspace(0.0, T, N + 1)


def _check_times(t_grid) -> np.ndarray:
    times = np.asarray(t_grid, dtype=float)
    if times.ndim != 1 or len(times) < 2:
        raise InputError("time grid needs at least two points")
    if np.any(np.diff(times) <= 0):
        raise InputError("time grid must be strictly increasing")
    return times


def sample_control(control: ControlSignal, times: np.ndarray, m: int) -> np.ndarray:
    """Piecewise-constant samples (N, m). Callables are sampled at interval midpoints."""
    N = len(times) - 1
    if callable(control):
        mids = 0.5 * (times[:-1] + times[1:])
        values = np.array([np.asarray(control(t), dtype=float).reshape(-1) for t in mids])
    else:
        values = np.asarray(control, dtype=float)
        if values.ndim == 1:
            values = np.broadcast_to(values, (N, values.shape[0]))
    if values.shape != (N, m):
        raise InputError("control must be defined on every interval of the time grid",
                         expected=[N, m], got=list(values.shape))
    return np.array(values)


def rollout(
    system: ControlSystemSpec,
    x0: np.ndarray,
    controls: np.ndarray,
    times: np.ndarray,
    spec: Optional[LagrangianSpec] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    RK4 with frozen control per interval. With ``spec`` the running cost is
    integrated as an extra state; the cumulative cost per node is returned.
    """
    x = np.asarray(x0, dtype=float)
    controls = np.asarray(controls, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], controls.shape[:-2])
    x = np.broadcast_to(x, batch + x.shape[-1:]).copy()
    steps = np.diff(times)

    states = [x]
    costs = [np.zeros(batch)] if spec is not None else None
    c = np.zeros(batch)
    for k, h in enumerate(steps):
        u = controls[..., k, :]
        k1 = eval_dynamics(system, x, u)
        k2 = eval_dynamics(system, x + 0.5 * h * k1, u)
        k3 = eval_dynamics(system, x + 0.5 * h * k2, u)
        k4 = eval_dynamics(system, x + h * k3, u)
        if spec is not None:
            l1 = eval_lagrangian(spec, x, u)
            l2 = eval_lagrangian(spec, x + 0.5 * h * k1, u)
            l3 = eval_lagrangian(spec, x + 0.5 * h * k2, u)
            l4 = eval_lagrangian(spec, x + h * k3, u)
            c = c + (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
            costs.append(c)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)) or (spec is not None and not np.all(np.isfinite(c))):
            raise DivergenceError("non-finite state during integration", step=k + 1)
        states.append(x)

    stacked = np.stack(states, axis=-2)
    return stacked, (np.stack(costs, axis=-1) if spec is not None else None)


def integrate(system: ControlSystemSpec, x0, control: ControlSignal, t_grid) -> Trajectory:
    """Integrate from x0 under a piecewise-constant control on t_grid; cost is left at 0."""
    times = _check_times(t_grid)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.dimension,):
        raise InputError("initial state has the wrong dimension", expected=system.dimension, got=list(x0.shape))
    controls = sample_control(control, times, system.control_dimension)
    states, _ = rollout(system, x0, controls, times)
    return Trajectory(times=times, states=states, control=controls)


def cost(spec: LagrangianSpec, traj: Trajectory) -> float:
    """Composite Simpson of L along the nodes (trapezoid for an odd interval count)."""
    if traj.states.shape[-1] != spec.dimension or traj.control.shape[-1] != spec.control_dimension:
        raise InputError("trajectory and Lagrangian dimensions differ")
    integrand = eval_lagrangian(spec, traj.states, traj.control_at_nodes())
    if traj.n_intervals % 2 == 0:
        value = float(simpson(integrand, x=traj.times))
    else:
        value = float(trapezoid(integrand, x=traj.times))
    traj.integrand = integrand
    traj.cost = value
    return value


# ---------------------------------------------------------------------------
# Direct optimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    restarts: int = 8
    perturbation: float = 0.5
    continuation_rounds: int = 3
    continuation_factor: float = 10.0
    maxiter: int = 5000
    stall_window: int = 20
    stall_tolerance: float = 1e-8
    fd_step: float = 1e-6


class _StallMonitor:
    """Stops L-BFGS-B when the relative decrease over a window is below tolerance."""

    def __init__(self, window: int, tolerance: float):
        self.window = window
        self.tolerance = tolerance
        self.history: List[float] = []

    def __call__(self, intermediate_result):
        self.history.append(float(intermediate_result.fun))
        if len(self.history) > self.window:
            old, new = self.history[-self.window - 1], self.history[-1]
            if old - new <= self.tolerance * max(abs(old), 1e-300):
                raise StopIteration


def _make_objective(system, spec, x0, times, N, m, target, mu, fd_step):
    def penalized(z_batch: np.ndarray) -> np.ndarray:
        controls = z_batch.reshape(z_batch.shape[:-1] + (N, m))
        states, running = rollout(system, x0, controls, times, spec)
        value = running[..., -1]
        if target is not None:
            value = value + mu * np.sum((states[..., -1, :] - target) ** 2, axis=-1)
        return value

    def fun(z: np.ndarray) -> Tuple[float, np.ndarray]:
        n = z.size
        offsets = fd_step * np.eye(n)
        batch = np.concatenate([z[None, :], z + offsets, z - offsets], axis=0)
        values = penalized(batch)
        if not np.all(np.isfinite(values)):
            raise DivergenceError("non-finite objective in direct_minimize")
        grad = (values[1:n + 1] - values[n + 1:]) / (2.0 * fd_step)
        return float(values[0]), grad

    return fun, penalized


def _single_start(system, spec, x0, times, N, z0, target, mu_schedule, opts: OptimizerConfig):
    m = system.control_dimension
    z = z0.copy()
    iterations = 0
    objective = np.inf
    for mu in mu_schedule:
        fun, _ = _make_objective(system, spec, x0, times, N, m, target, mu, opts.fd_step)
        result = minimize(
            fun,
            z,
            jac=True,
            method="L-BFGS-B",
            callback=_StallMonitor(opts.stall_window, opts.stall_tolerance),
            options={"maxiter": opts.maxiter, "ftol": 1e-15, "gtol": 1e-10},
        )
        z = result.x
        objective = float(result.fun)
        iterations += int(result.nit)
    inc("trajectory.iterations", iterations)
    return z, objective, iterations


def direct_minimize(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    x0,
    T: float,
    N: int,
    endpoint: Optional[Tuple[Sequence[float], float]] = None,
    restarts: int = 8,
    seed: int = 0,
    threads: int = 1,
    options: Optional[OptimizerConfig] = None,
) -> Tuple[Trajectory, float]:
    """
    Minimize int_0^T L(gamma, u) (+ mu |gamma(T) - y|^2 with ``endpoint=(y, mu)``)
    over piecewise-constant controls with N intervals.

    Restart 0 starts at u == u*, the others at u* + 0.5 N(0, 1). With an
    endpoint, mu is ramped by x10 over three warm-started rounds. Returns the
    best trajectory and its running cost (penalty excluded); this is an upper
    bound on the true minimum.
    """
    opts = options or OptimizerConfig(restarts=restarts)
    restarts = max(1, restarts)
    times = uniform_grid(T, N)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.dimension,):
        raise InputError("initial state has the wrong dimension", expected=system.dimension, got=list(x0.shape))
    m = system.control_dimension

    target = None
    mu_schedule = [0.0]
    if endpoint is not None:
        target = np.asarray(endpoint[0], dtype=float)
        if target.shape != (system.dimension,):
            raise InputError("endpoint target has the wrong dimension", expected=system.dimension)
        mu0 = float(endpoint[1])
        if mu0 <= 0:
            raise InputError("penalty weight must be positive", mu=mu0)
        mu_schedule = [mu0 * opts.continuation_factor ** k for k in range(opts.continuation_rounds)]

    base = np.tile(spec.u_star, N)
    children = np.random.SeedSequence(seed).spawn(restarts)
    starts = [base.copy()]
    for child in children[1:]:
        starts.append(base + opts.perturbation * np.random.default_rng(child).standard_normal(N * m))

    def run(index: int):
        return _single_start(system, spec, x0, times, N, starts[index], target, mu_schedule, opts)

    with track_duration("trajectory", "direct_minimize"):
        if threads > 1 and restarts > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run, range(restarts)))
        else:
            results = [run(i) for i in range(restarts)]

    best = min(range(restarts), key=lambda i: (results[i][1], i))
    z, objective, iterations = results[best]
    controls = z.reshape(N, m)
    states, running = rollout(system, x0, controls, times, spec)
    running_cost = float(running[-1])
    traj = Trajectory(times=times, states=states, control=controls, cost=running_cost)
    traj.info.update(
        objective=objective,
        restart=best,
        iterations=iterations,
        mu=mu_schedule[-1],
        endpoint_residual=float(np.linalg.norm(states[-1] - target)) if target is not None else 0.0,
    )
    logger.debug(
        "trajectory.direct_minimize.done",
        extra={"operation": "direct_minimize", "value": running_cost, "iterations": iterations,
               "seed": seed, "residual": traj.info["endpoint_residual"]},
    )
    return traj, running_cost


# ---------------------------------------------------------------------------
# A priori bounds
# ---------------------------------------------------------------------------

def gronwall_envelope(system: ControlSystemSpec, traj: Trajectory) -> np.ndarray:
    """Per-node bound (|x0| + c t) e^{c t} with c = c_f (1 + max|u|)."""
    c = system.c_f * (1.0 + float(np.max(np.linalg.norm(traj.control, axis=-1))))
    t = traj.times - traj.times[0]
    return (np.linalg.norm(traj.states[0]) + c * t) * np.exp(c * t)


class L2BoundsReport(BaseModel):
    kappa: float
    holder_constant: float
    fitted_exponent: float
    holder_ok: bool
    n_trajectories: int


def l2_bounds(system: ControlSystemSpec, trajectories: Sequence[Trajectory], exponent_tol: float = 0.05) -> L2BoundsReport:
    """
    Empirical kappa with |gamma(s)| <= kappa (1 + |x0|) and the constant of
    |gamma(t2) - gamma(t1)| <= C (1 + |x0|) ||u||_2 |t2 - t1|^{1/2}; the fitted
    increment exponent must be at least 1/2.
    """
    if not system.is_driftless:
        raise InputError("L2 bounds are stated for driftless systems", kind=system.kind)
    if not trajectories:
        raise InputError("need at least one trajectory")
    kappa = 0.0
    holder = 0.0
    lag_logs: List[float] = []
    inc_logs: List[float] = []
    for traj in trajectories:
        scale = 1.0 + np.linalg.norm(traj.states[0])
        kappa = max(kappa, float(np.max(np.linalg.norm(traj.states, axis=-1)) / scale))
        l2 = float(np.sqrt(np.sum(np.sum(traj.control ** 2, axis=-1) * np.diff(traj.times))))
        N = traj.n_intervals
        for lag in sorted({max(1, N // 2 ** k) for k in range(6)}):
            dt = traj.times[lag:] - traj.times[:-lag]
            jump = np.linalg.norm(traj.states[lag:] - traj.states[:-lag], axis=-1)
            if l2 > 0:
                holder = max(holder, float(np.max(jump / (scale * l2 * np.sqrt(dt)))))
            if np.max(jump) > 0:
                lag_logs.append(float(np.log(np.mean(dt))))
                inc_logs.append(float(np.log(np.max(jump))))
    exponent = float(np.polyfit(lag_logs, inc_logs, 1)[0]) if len(set(lag_logs)) > 1 else 1.0
    return L2BoundsReport(
        kappa=kappa,
        holder_constant=holder,
        fitted_exponent=exponent,
        holder_ok=bool(exponent >= 0.5 - exponent_tol),
        n_trajectories=len(trajectories),
    )
