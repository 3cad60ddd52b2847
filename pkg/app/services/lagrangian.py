"""
Running costs L(x, u): construction, assumption audits and the Hamiltonian
H(x, p) = sup_u { <p, f(x, u)> - L(x, u) }.

Two kinds are supported:
  quadratic_plus_potential   L = 1/2 |u - u*|^2 + g(x)
  generic                    any polynomial (or vectorized callable) in (x, u)
"""
import dataclasses
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from app.exceptions import InputError, ModeError
from app.services.systems import ControlSystemSpec, control_matrix, eval_dynamics
from app.utils.expressions import Polynomial, radial_polynomial, state_control_polynomial, state_polynomial
from app.utils.logger import get_logger

logger = get_logger(__name__)

LAGRANGIAN_KINDS = ("quadratic_plus_potential", "generic")
HAMILTONIAN_MODES = ("closed_form", "numeric")

CostFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Bound function beta of (L1)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BetaBound:
    """Nondecreasing beta(r): a polynomial in r or a piecewise-linear table."""

    text: Optional[str] = None
    polynomial: Optional[Polynomial] = None
    table: Optional[np.ndarray] = None

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.polynomial is not None:
            return self.polynomial(r[..., None])
        # constant beyond the last entry
        return np.interp(r, self.table[:, 0], self.table[:, 1])

    def is_monotone(self, radius: float, n_points: int = 512) -> bool:
        r = np.linspace(0.0, radius, n_points)
        return bool(np.all(np.diff(self(r)) >= -1e-12))

    @classmethod
    def parse(cls, value) -> "BetaBound":
        if isinstance(value, BetaBound):
            return value
        if isinstance(value, (int, float)):
            value = repr(float(value))
        if isinstance(value, str):
            return cls(text=value, polynomial=radial_polynomial(value))
        table = np.array(value, dtype=float)
        if table.ndim != 2 or table.shape[1] != 2 or len(table) < 1:
            raise InputError("beta table must be a list of [r, value] pairs")
        if np.any(np.diff(table[:, 0]) <= 0):
            raise InputError("beta table radii must be strictly increasing")
        if np.any(np.diff(table[:, 1]) < 0):
            raise InputError("beta table values must be nondecreasing")
        table.setflags(write=False)
        return cls(table=table)


# ---------------------------------------------------------------------------
# Spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LagrangianSpec:
    """
    A running cost with the data its assumptions refer to.

    ``cost`` is the un-shifted cost; ``offset`` is a constant added on
    evaluation (see ``shifted``). ``potential`` is g for the quadratic kind.
    """

    name: str
    kind: str
    dimension: int
    control_dimension: int
    cost: CostFunction
    u_star: np.ndarray
    x_star: np.ndarray
    ell1: float = 1.0
    theta: float = 0.5
    K_radius: float = 1.0
    beta: Optional[BetaBound] = None
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    offset: float = 0.0
    normalized: bool = False

    def __post_init__(self):
        if self.kind not in LAGRANGIAN_KINDS:
            raise InputError(f"unknown Lagrangian kind {self.kind!r}; expected one of {LAGRANGIAN_KINDS}")
        u_star = np.array(self.u_star, dtype=float)
        x_star = np.array(self.x_star, dtype=float)
        if u_star.shape != (self.control_dimension,):
            raise InputError("u_star has the wrong dimension", expected=self.control_dimension, got=list(u_star.shape))
        if x_star.shape != (self.dimension,):
            raise InputError("x_star has the wrong dimension", expected=self.dimension, got=list(x_star.shape))
        if self.ell1 <= 0 or self.theta <= 0 or self.K_radius < 0:
            raise InputError("ell1 and theta must be positive, K_radius nonnegative",
                             ell1=self.ell1, theta=self.theta, K_radius=self.K_radius)
        if self.kind == "quadratic_plus_potential" and self.potential is None:
            raise InputError("quadratic_plus_potential needs a potential g")
        u_star.setflags(write=False)
        x_star.setflags(write=False)
        object.__setattr__(self, "u_star", u_star)
        object.__setattr__(self, "x_star", x_star)

    def __repr__(self) -> str:
        return f"LagrangianSpec(name={self.name!r}, kind={self.kind!r}, offset={self.offset})"


def _check_pair(spec: LagrangianSpec, x: np.ndarray, u: np.ndarray) -> None:
    if x.ndim == 0 or x.shape[-1] != spec.dimension:
        raise InputError(f"state has dimension {x.shape[-1] if x.ndim else 0}, expected {spec.dimension}")
    if u.ndim == 0 or u.shape[-1] != spec.control_dimension:
        raise InputError(f"control has dimension {u.shape[-1] if u.ndim else 0}, expected {spec.control_dimension}")


def eval_lagrangian(spec: LagrangianSpec, x, u):
    """L(x, u); broadcasts leading axes and returns a float for single points."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_pair(spec, x, u)
    value = np.asarray(spec.cost(x, u), dtype=float) + spec.offset
    value = value + np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]))
    if value.ndim == 0:
        return float(value)
    return value


def eval_potential(spec: LagrangianSpec, x) -> np.ndarray:
    """g(x) for the quadratic kind."""
    if spec.potential is None:
        raise ModeError("Lagrangian has no potential term", kind=spec.kind)
    x = np.asarray(x, dtype=float)
    return np.asarray(spec.potential(x), dtype=float) + np.zeros(x.shape[:-1])


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def _as_state_function(g, dimension: int) -> Tuple[Callable, str]:
    if isinstance(g, (int, float)):
        g = repr(float(g))
    if isinstance(g, str):
        poly = state_polynomial(g, dimension)
        return poly, g
    if isinstance(g, Polynomial):
        return g, g.text
    return g, getattr(g, "__name__", "g")


def quadratic_lagrangian(
    g,
    dimension: int,
    control_dimension: int,
    u_star: Optional[Sequence[float]] = None,
    x_star: Optional[Sequence[float]] = None,
    ell1: float = 1.0,
    theta: float = 0.5,
    K_radius: float = 1.0,
    beta=None,
    normalized: bool = False,
    name: Optional[str] = None,
) -> LagrangianSpec:
    """L(x, u) = 1/2 |u - u*|^2 + g(x)."""
    potential, label = _as_state_function(g, dimension)
    u_star = np.zeros(control_dimension) if u_star is None else np.asarray(u_star, dtype=float)
    x_star = np.zeros(dimension) if x_star is None else np.asarray(x_star, dtype=float)
    u_star_frozen = u_star.copy()

    def cost(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return 0.5 * np.sum((u - u_star_frozen) ** 2, axis=-1) + potential(x)

    return LagrangianSpec(
        name=name or f"quadratic(g={label})",
        kind="quadratic_plus_potential",
        dimension=dimension,
        control_dimension=control_dimension,
        cost=cost,
        u_star=u_star,
        x_star=x_star,
        ell1=ell1,
        theta=theta,
        K_radius=K_radius,
        beta=None if beta is None else BetaBound.parse(beta),
        potential=potential,
        normalized=normalized,
    )


def generic_lagrangian(
    expression,
    dimension: int,
    control_dimension: int,
    u_star: Optional[Sequence[float]] = None,
    x_star: Optional[Sequence[float]] = None,
    ell1: float = 1.0,
    theta: float = 0.5,
    K_radius: float = 1.0,
    beta=None,
    normalized: bool = False,
    name: Optional[str] = None,
) -> LagrangianSpec:
    """L given as a polynomial in x, y, z, u1..um (or a vectorized callable of (x, u))."""
    if isinstance(expression, (int, float)):
        expression = repr(float(expression))
    if isinstance(expression, str):
        poly = state_control_polynomial(expression, dimension, control_dimension)
        label = expression

        def cost(x: np.ndarray, u: np.ndarray) -> np.ndarray:
            shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
            joined = np.concatenate(
                [np.broadcast_to(x, shape + x.shape[-1:]), np.broadcast_to(u, shape + u.shape[-1:])], axis=-1
            )
            return poly(joined)
    else:
        cost = expression
        label = getattr(expression, "__name__", "L")

    return LagrangianSpec(
        name=name or f"generic(L={label})",
        kind="generic",
        dimension=dimension,
        control_dimension=control_dimension,
        cost=cost,
        u_star=np.zeros(control_dimension) if u_star is None else u_star,
        x_star=np.zeros(dimension) if x_star is None else x_star,
        ell1=ell1,
        theta=theta,
        K_radius=K_radius,
        beta=None if beta is None else BetaBound.parse(beta),
        normalized=normalized,
    )


def constant_lagrangian(value: float, dimension: int, control_dimension: int) -> LagrangianSpec:
    """L == value; every path has cost value * T."""
    return generic_lagrangian(value, dimension, control_dimension, name=f"constant({value!r})")


def shifted(spec: LagrangianSpec, c: float) -> LagrangianSpec:
    """L + c. Normalizing by the critical constant is shifted(spec, -mane)."""
    return dataclasses.replace(spec, offset=spec.offset + float(c))


def lagrangian_from_config(cfg, system: ControlSystemSpec) -> LagrangianSpec:
    """Build a Lagrangian from a validated ``LagrangianConfig`` for ``system``."""
    d, m = system.dimension, system.control_dimension
    u_star = cfg.u_star if cfg.u_star is not None else system.u_star
    common = dict(
        u_star=u_star,
        x_star=cfg.x_star,
        ell1=cfg.ell1,
        theta=cfg.theta,
        K_radius=cfg.K_radius,
        beta=cfg.beta,
        normalized=cfg.normalized,
    )
    if cfg.kind == "quadratic_plus_potential":
        spec = quadratic_lagrangian(cfg.g, d, m, **common)
    else:
        spec = generic_lagrangian(cfg.L, d, m, **common)
    return shifted(spec, cfg.shift) if cfg.shift else spec


# ---------------------------------------------------------------------------
# Assumption audit
# ---------------------------------------------------------------------------

class ClauseResult(BaseModel):
    passed: bool
    worst: Optional[float] = None
    witness: Optional[List[float]] = None
    skipped: bool = False
    note: str = ""


class AssumptionReport(BaseModel):
    lagrangian: str
    system: str
    n_samples: int
    seed: int
    box_lower: List[float]
    box_upper: List[float]
    clauses: Dict[str, ClauseResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses.values())

    def failed(self) -> List[str]:
        return [name for name, c in self.clauses.items() if not c.passed]


def _worst(excess: np.ndarray, points: np.ndarray, tol: float) -> ClauseResult:
    """Pass iff max(excess) <= tol; the witness is the arg max sample."""
    idx = int(np.argmax(excess))
    return ClauseResult(passed=bool(excess[idx] <= tol), worst=float(excess[idx]), witness=points[idx].tolist())


def _skipped(note: str) -> ClauseResult:
    return ClauseResult(passed=True, skipped=True, note=note)


def control_hessian(spec: LagrangianSpec, x: np.ndarray, u: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian of L in u, shape (..., m, m)."""
    m = spec.control_dimension
    eye = h * np.eye(m)
    hess = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (m, m))
    for i in range(m):
        for j in range(i, m):
            value = (
                eval_lagrangian(spec, x, u + eye[i] + eye[j])
                - eval_lagrangian(spec, x, u + eye[i] - eye[j])
                - eval_lagrangian(spec, x, u - eye[i] + eye[j])
                + eval_lagrangian(spec, x, u - eye[i] - eye[j])
            ) / (4.0 * h * h)
            hess[..., i, j] = value
            hess[..., j, i] = value
    return hess


def state_gradient(spec: LagrangianSpec, x: np.ndarray, u: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """D_x L, exact for polynomial potentials, central differences otherwise."""
    if isinstance(spec.potential, Polynomial):
        return spec.potential.gradient(x) + np.zeros(u.shape[:-1] + (1,))
    eye = h * np.eye(spec.dimension)
    parts = [
        (eval_lagrangian(spec, x + eye[i], u) - eval_lagrangian(spec, x - eye[i], u)) / (2.0 * h)
        for i in range(spec.dimension)
    ]
    return np.stack(parts, axis=-1)


def validate_assumptions(
    spec: LagrangianSpec,
    system: ControlSystemSpec,
    sample_box: Tuple[Sequence[float], Sequence[float]],
    n_samples: int = 10000,
    seed: int = 0,
    control_radius: float = 3.0,
    tol: float = 1e-6,
    hessian_tol: float = 1e-4,
) -> AssumptionReport:
    """
    Sample-based audit of (L1)-(L3), the coercivity bound they imply and,
    when declared, the (L3') normalization. Failures are reported, never raised.
    """
    lower = np.asarray(sample_box[0], dtype=float)
    upper = np.asarray(sample_box[1], dtype=float)
    d, m = spec.dimension, spec.control_dimension
    if lower.shape != (d,) or upper.shape != (d,) or np.any(upper <= lower):
        raise InputError("sample box must be two corners of dimension d with upper > lower")
    if system.dimension != d or system.control_dimension != m:
        raise InputError("Lagrangian and system dimensions differ",
                         lagrangian=[d, m], system=[system.dimension, system.control_dimension])
    if np.any(lower > -spec.K_radius) or np.any(upper < spec.K_radius):
        logger.warning("lagrangian.audit.box_smaller_than_K",
                       extra={"operation": "validate_assumptions", "value": spec.K_radius})

    rng = np.random.default_rng(seed)
    x = rng.uniform(lower, upper, size=(n_samples, d))
    u = spec.u_star + rng.uniform(-control_radius, control_radius, size=(n_samples, m))
    xu = np.concatenate([x, u], axis=-1)

    L = eval_lagrangian(spec, x, u)
    L_star_u = eval_lagrangian(spec, x, spec.u_star)
    L_star = eval_lagrangian(spec, spec.x_star, spec.u_star)
    u_sq = np.sum(u ** 2, axis=-1)
    radius = np.linalg.norm(x, axis=-1)
    inside = radius <= spec.K_radius
    clauses: Dict[str, ClauseResult] = {}

    if spec.beta is None:
        clauses["L1_growth"] = _skipped("no beta declared")
    else:
        bound = spec.beta(radius) * (1.0 + u_sq)
        clauses["L1_growth"] = _worst(L - bound, xu, tol)
        if not spec.beta.is_monotone(float(np.max(np.abs([lower, upper])) * np.sqrt(d))):
            clauses["L1_growth"] = ClauseResult(passed=False, note="beta is not nondecreasing on the audited range")

    grad = np.linalg.norm(state_gradient(spec, x, u), axis=-1)
    clauses["L1_gradient"] = _worst(grad - spec.ell1 * (1.0 + u_sq), xu, tol)

    eigen = np.linalg.eigvalsh(control_hessian(spec, x, u))[..., 0]
    clauses["L1_convexity"] = _worst(1.0 / spec.ell1 - eigen, xu, hessian_tol)

    clauses["L2_minimizer"] = _worst(L_star_u - L, xu, tol)

    coercive = (0.5 / spec.ell1) * np.sum((u - spec.u_star) ** 2, axis=-1) + L_star
    clauses["L0_coercivity"] = _worst(coercive - L, xu, tol)

    drift = np.linalg.norm(eval_dynamics(system, spec.x_star, spec.u_star))
    clauses["L3_stationary"] = ClauseResult(passed=bool(drift <= 1e-10), worst=float(drift),
                                            witness=spec.x_star.tolist())

    k_min = min(float(np.min(L_star_u[inside])) if np.any(inside) else np.inf, L_star)
    clauses["L3_argmin"] = ClauseResult(
        passed=bool(np.linalg.norm(spec.x_star) <= spec.K_radius and L_star <= k_min + tol),
        worst=float(L_star - k_min),
        witness=spec.x_star.tolist(),
    )

    if np.any(~inside):
        clauses["L3_gap"] = _worst(spec.theta + k_min - L_star_u[~inside], x[~inside], tol)
    else:
        clauses["L3_gap"] = _skipped("no samples outside K")

    if spec.normalized:
        zero = np.zeros(m)
        L0_out = eval_lagrangian(spec, x[~inside], zero) if np.any(~inside) else np.array([np.inf])
        L0_star = eval_lagrangian(spec, spec.x_star, zero)
        clauses["L3prime_normalized"] = ClauseResult(
            passed=bool(abs(L0_star) <= tol and np.min(L0_out) > 0.0),
            worst=float(max(abs(L0_star), -np.min(L0_out))),
            witness=spec.x_star.tolist(),
        )

    report = AssumptionReport(
        lagrangian=spec.name,
        system=system.name,
        n_samples=n_samples,
        seed=seed,
        box_lower=lower.tolist(),
        box_upper=upper.tolist(),
        clauses=clauses,
    )
    logger.info(
        "lagrangian.audit.done",
        extra={"operation": "validate_assumptions", "status": "pass" if report.passed else "fail",
               "count": n_samples, "seed": seed},
    )
    return report


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlMesh:
    """
    Box mesh centered at u* used by the numeric supremum.

    radius=None picks safety * |p| * max_i |f_i(x)| + |u*| per point.
    """

    points_per_axis: int = 41
    radius: Optional[float] = None
    safety: float = 3.0
    refine: bool = True

    def __post_init__(self):
        if self.points_per_axis < 2:
            raise InputError("control mesh needs at least 2 points per axis")
        if self.radius is not None and self.radius <= 0:
            raise InputError("control mesh radius must be positive", radius=self.radius)


def _control_gain(system: ControlSystemSpec, x: np.ndarray, u_star: np.ndarray) -> np.ndarray:
    """max_i |f(x, u* + e_i) - f(x, u*)|; equals max_i |f_i(x)| for control-affine systems."""
    if system.kind != "generic":
        F = control_matrix(system, x)
        return np.max(np.linalg.norm(F, axis=-2), axis=-1)
    base = eval_dynamics(system, x, u_star)
    gains = [np.linalg.norm(eval_dynamics(system, x, u_star + e) - base, axis=-1)
             for e in np.eye(system.control_dimension)]
    return np.max(np.stack(gains, axis=-1), axis=-1)


def _unit_box(points_per_axis: int, m: int) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, points_per_axis)
    grids = np.meshgrid(*([axis] * m), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _hamiltonian_numeric(spec, system, x, p, mesh: ControlMesh) -> np.ndarray:
    m = spec.control_dimension
    unit = _unit_box(mesh.points_per_axis, m)
    if mesh.radius is not None:
        radius = np.full(x.shape[:-1], mesh.radius)
    else:
        gain = _control_gain(system, x, spec.u_star)
        radius = mesh.safety * np.linalg.norm(p, axis=-1) * gain + np.linalg.norm(spec.u_star)
    # a zero radius collapses the mesh onto u*, the minimizer of L(x, .)
    radius = np.maximum(radius, 1e-12)

    def objective(controls: np.ndarray) -> np.ndarray:
        xs = x[..., None, :]
        velocity = eval_dynamics(system, xs, controls)
        return np.sum(p[..., None, :] * velocity, axis=-1) - eval_lagrangian(spec, xs, controls)

    controls = spec.u_star + radius[..., None, None] * unit
    values = objective(controls)
    best = np.argmax(values, axis=-1)
    best_value = np.take_along_axis(values, best[..., None], axis=-1)[..., 0]

    if mesh.refine:
        center = np.take_along_axis(controls, best[..., None, None], axis=-2)
        spacing = 2.0 * radius / (mesh.points_per_axis - 1)
        local = center + spacing[..., None, None] * unit
        best_value = np.maximum(best_value, np.max(objective(local), axis=-1))
    return best_value


def hamiltonian(
    spec: LagrangianSpec,
    system: ControlSystemSpec,
    x,
    p,
    mode: str = "closed_form",
    control_mesh: Optional[ControlMesh] = None,
):
    """
    H(x, p). closed_form is 1/2 |F(x)^T p|^2 - g(x) and needs a quadratic
    Lagrangian with u* = 0 on a driftless system; numeric takes the max over a
    control mesh with one local refinement around the best point.
    """
    if mode not in HAMILTONIAN_MODES:
        raise ModeError(f"unknown Hamiltonian mode {mode!r}; expected one of {HAMILTONIAN_MODES}")
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape[-1:] != (spec.dimension,) or p.shape[-1:] != (spec.dimension,):
        raise InputError("state and costate must have dimension d", expected=spec.dimension)
    x, p = np.broadcast_arrays(x, p)

    if mode == "closed_form":
        if not closed_form_available(spec, system):
            raise ModeError("closed-form Hamiltonian needs a quadratic Lagrangian with u*=0 on a driftless system",
                            kind=spec.kind, system_kind=system.kind)
        Ftp = np.matmul(np.swapaxes(control_matrix(system, x), -1, -2), p[..., None])[..., 0]
        value = 0.5 * np.sum(Ftp ** 2, axis=-1) - eval_potential(spec, x) - spec.offset
    else:
        value = _hamiltonian_numeric(spec, system, x, p, control_mesh or ControlMesh())

    if value.ndim == 0:
        return float(value)
    return value


def closed_form_available(spec: LagrangianSpec, system: ControlSystemSpec) -> bool:
    return (
        spec.kind == "quadratic_plus_potential"
        and system.is_driftless
        and not np.any(spec.u_star)
    )
