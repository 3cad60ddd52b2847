"""
Control systems on R^d: generic f(x, u), driftless control-affine
sum_i u_i f_i(x) (sub-Riemannian), and linear Ax + Bu.

All evaluation functions are vectorized over leading axes: states have shape
(..., d), controls (..., m).
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy.integrate import quad_vec
from scipy.linalg import expm

from app.exceptions import InputError
from app.utils.expressions import Polynomial, compile_polynomial
from app.utils.logger import get_logger

logger = get_logger(__name__)

SYSTEM_KINDS = ("generic", "driftless_affine", "linear")

VectorField = Callable[[np.ndarray], np.ndarray]
Dynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Specs and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControlSystemSpec:
    """Immutable description of a control system and its (F0)/(F1) constant."""

    name: str
    dimension: int
    control_dimension: int
    kind: str
    c_f: float = 1.0
    u_star: Optional[np.ndarray] = None
    fields: Tuple[VectorField, ...] = ()
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    dynamics: Optional[Dynamics] = None
    exact_brackets: Dict[Tuple[int, int], VectorField] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SYSTEM_KINDS:
            raise InputError(f"unknown system kind {self.kind!r}; expected one of {SYSTEM_KINDS}")
        if self.dimension < 1 or self.control_dimension < 1:
            raise InputError("system dimensions must be positive integers",
                             dimension=self.dimension, control_dimension=self.control_dimension)
        if self.c_f < 0:
            raise InputError("c_f must be nonnegative", c_f=self.c_f)

        u_star = np.zeros(self.control_dimension) if self.u_star is None else _frozen(self.u_star)
        if u_star.shape != (self.control_dimension,):
            raise InputError("u_star has the wrong dimension",
                             expected=self.control_dimension, got=list(u_star.shape))
        object.__setattr__(self, "u_star", _frozen(u_star))

        if self.kind == "driftless_affine":
            if len(self.fields) != self.control_dimension:
                raise InputError("driftless system needs one vector field per control",
                                 fields=len(self.fields), control_dimension=self.control_dimension)
            if np.any(self.u_star != 0):
                raise InputError("driftless systems have u_star = 0")
        elif self.kind == "linear":
            if self.A is None or self.B is None:
                raise InputError("linear system needs both A and B")
            A, B = _frozen(self.A), _frozen(self.B)
            _check_linear_shapes(A, B)
            if A.shape[0] != self.dimension or B.shape[1] != self.control_dimension:
                raise InputError("A/B shapes disagree with the declared dimensions",
                                 A=list(A.shape), B=list(B.shape))
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "B", B)
        elif self.dynamics is None:
            raise InputError("generic system needs a dynamics callable")

    @property
    def is_driftless(self) -> bool:
        return self.kind == "driftless_affine"

    def __repr__(self) -> str:
        return (f"ControlSystemSpec(name={self.name!r}, kind={self.kind!r}, "
                f"d={self.dimension}, m={self.control_dimension}, c_f={self.c_f})")


class ChowReport(BaseModel):
    point: List[float]
    holds: bool
    degree: int
    basis_ranks: List[int]


class SystemAuditReport(BaseModel):
    c_f: float
    lipschitz_quotient: float
    growth_quotient: float
    linearity_error: Optional[float] = None
    lipschitz_ok: bool
    growth_ok: bool
    linearity_ok: Optional[bool] = None
    n_samples: int

    @property
    def passed(self) -> bool:
        return self.lipschitz_ok and self.growth_ok and self.linearity_ok is not False


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_linear_shapes(A: np.ndarray, B: np.ndarray) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError("A must be a square matrix", A=list(A.shape))
    if B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise InputError("B must have as many rows as A", A=list(A.shape), B=list(B.shape))


def _check_last_dim(arr: np.ndarray, n: int, what: str) -> None:
    if arr.ndim == 0 or arr.shape[-1] != n:
        raise InputError(f"{what} has dimension {arr.shape[-1] if arr.ndim else 0}, expected {n}",
                         expected=n, got=list(arr.shape))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def control_matrix(system: ControlSystemSpec, x: np.ndarray) -> np.ndarray:
    """F(x) = [f_1(x) | ... | f_m(x)], shape (..., d, m). Linear systems return B."""
    x = np.asarray(x, dtype=float)
    _check_last_dim(x, system.dimension, "state")
    if system.is_driftless:
        return np.stack([f(x) for f in system.fields], axis=-1)
    if system.kind == "linear":
        return np.broadcast_to(system.B, x.shape[:-1] + system.B.shape)
    raise InputError("control_matrix needs a control-affine system", kind=system.kind)


def eval_dynamics(system: ControlSystemSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Velocity f(x, u), broadcasting leading axes of x and u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_last_dim(x, system.dimension, "state")
    _check_last_dim(u, system.control_dimension, "control")

    if system.is_driftless:
        F = control_matrix(system, x)
        return np.matmul(F, u[..., None])[..., 0]
    if system.kind == "linear":
        return x @ system.A.T + u @ system.B.T
    return np.asarray(system.dynamics(x, u), dtype=float)


def jacobian(field_fn: VectorField, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian J[..., i, j] = d field_i / d x_j."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    offsets = h * np.eye(d)
    plus = field_fn(x[..., None, :] + offsets)
    minus = field_fn(x[..., None, :] - offsets)
    return np.swapaxes((plus - minus) / (2.0 * h), -1, -2)


BRACKET_CONVENTION = "[X,Y] = DY X - DX Y"


def lie_bracket(X: VectorField, Y: VectorField, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """[X, Y](x) = DY(x) X(x) - DX(x) Y(x) with central-difference Jacobians."""
    if h <= 0:
        raise InputError("finite-difference step must be positive", h=h)
    x = np.asarray(x, dtype=float)
    DX = jacobian(X, x, h)
    DY = jacobian(Y, x, h)
    return np.matmul(DY, X(x)[..., None])[..., 0] - np.matmul(DX, Y(x)[..., None])[..., 0]


def bracket_field(X: VectorField, Y: VectorField, h: float = 1e-4) -> VectorField:
    """The vector field z -> [X, Y](z), itself usable inside further brackets."""
    def _field(z: np.ndarray) -> np.ndarray:
        return lie_bracket(X, Y, z, h)
    return _field


def numeric_rank(vectors: np.ndarray, rank_tol: float = 1e-8) -> int:
    """Rank from singular values above rank_tol relative to the largest one."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if vectors.size == 0:
        return 0
    singular = np.linalg.svd(vectors, compute_uv=False)
    if singular[0] == 0.0:
        return 0
    return int(np.sum(singular > rank_tol * singular[0]))


def check_chow(
    system: ControlSystemSpec,
    x: np.ndarray,
    max_degree: int = 3,
    h: float = 1e-4,
    rank_tol: float = 1e-8,
) -> ChowReport:
    """
    Build the filtration D^1 = span{f_i(x)}, D^{s+1} = D^s + [D^1, D^s](x)
    and report the first s at which the rank reaches d.
    """
    if not system.is_driftless:
        raise InputError("Chow condition is checked for driftless control-affine systems only",
                         kind=system.kind)
    if max_degree < 1:
        raise InputError("max_degree must be a positive integer", max_degree=max_degree)
    x = np.asarray(x, dtype=float)
    _check_last_dim(x, system.dimension, "state")

    d = system.dimension
    generators: List[VectorField] = list(system.fields)
    newest: List[VectorField] = list(system.fields)
    vectors = [f(x) for f in generators]
    ranks = [numeric_rank(np.array(vectors), rank_tol)]

    s = 1
    while ranks[-1] < d and s < max_degree:
        newest = [bracket_field(X, Y, h) for X in system.fields for Y in newest]
        vectors.extend(Z(x) for Z in newest)
        ranks.append(numeric_rank(np.array(vectors), rank_tol))
        s += 1

    holds = ranks[-1] == d
    report = ChowReport(point=x.tolist(), holds=holds, degree=s, basis_ranks=ranks)
    if not holds:
        logger.debug("systems.chow.not_reached", extra={"operation": "check_chow", "value": ranks})
    return report


def kalman_controllable(A: np.ndarray, B: np.ndarray, rank_tol: float = 1e-8) -> bool:
    """rank [B, AB, ..., A^{d-1}B] == d."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    _check_linear_shapes(A, B)
    d = A.shape[0]
    blocks = [np.linalg.matrix_power(A, k) @ B for k in range(d)]
    return numeric_rank(np.hstack(blocks), rank_tol) == d


def controllability_gramian(A: np.ndarray, B: np.ndarray, T: float) -> np.ndarray:
    """Q_T = int_0^T e^{tA} B B^T e^{tA^T} dt."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    _check_linear_shapes(A, B)
    if T <= 0:
        raise InputError("Gramian horizon must be positive", T=T)
    BBt = B @ B.T

    def integrand(t: float) -> np.ndarray:
        E = expm(t * A)
        return E @ BBt @ E.T

    gramian, _ = quad_vec(integrand, 0.0, T, epsabs=1e-12, epsrel=1e-10)
    return gramian


def gramian_positive_definite(A: np.ndarray, B: np.ndarray, T: float = 1.0, rank_tol: float = 1e-8) -> bool:
    """Positive definiteness of Q_T, the integral form of Kalman's condition."""
    eigenvalues = np.linalg.eigvalsh(controllability_gramian(A, B, T))
    return bool(eigenvalues[-1] > 0 and eigenvalues[0] > rank_tol * eigenvalues[-1])


def minimum_energy(system: ControlSystemSpec, x: np.ndarray, y: np.ndarray, T: float) -> float:
    """Least int_0^T |u - u*|^2 joining x to y in time T for a linear system."""
    if system.kind != "linear":
        raise InputError("minimum_energy is closed-form for linear systems only", kind=system.kind)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A, B = system.A, system.B
    # shift by the stationary drift B u*: u = u* + w
    drift = B @ system.u_star
    E = expm(T * A)
    forced = quad_vec(lambda t: expm((T - t) * A) @ drift, 0.0, T)[0]
    gap = y - E @ x - forced
    gramian = controllability_gramian(A, B, T)
    return float(gap @ np.linalg.solve(gramian, gap))


def audit_constants(
    system: ControlSystemSpec,
    box_lower: Sequence[float],
    box_upper: Sequence[float],
    n_samples: int = 2000,
    seed: int = 0,
    control_radius: float = 3.0,
) -> SystemAuditReport:
    """Sampled (F0) Lipschitz and growth quotients; linearity in u for driftless systems."""
    rng = np.random.default_rng(seed)
    lower = np.asarray(box_lower, dtype=float)
    upper = np.asarray(box_upper, dtype=float)
    _check_last_dim(lower, system.dimension, "box corner")
    d, m = system.dimension, system.control_dimension

    x = rng.uniform(lower, upper, size=(n_samples, d))
    y = rng.uniform(lower, upper, size=(n_samples, d))
    u = rng.uniform(-control_radius, control_radius, size=(n_samples, m))
    w = rng.uniform(-control_radius, control_radius, size=(n_samples, m))

    fx = eval_dynamics(system, x, u)
    fy = eval_dynamics(system, y, u)
    norm_u = np.linalg.norm(u, axis=-1)
    dist = np.maximum(np.linalg.norm(x - y, axis=-1), 1e-300)
    lipschitz = np.linalg.norm(fx - fy, axis=-1) / ((1.0 + norm_u) * dist)
    growth = np.linalg.norm(fx, axis=-1) / ((1.0 + norm_u) * (1.0 + np.linalg.norm(x, axis=-1)))

    slack = 1.0 + 1e-9
    report = dict(
        c_f=system.c_f,
        lipschitz_quotient=float(lipschitz.max()),
        growth_quotient=float(growth.max()),
        lipschitz_ok=bool(lipschitz.max() <= system.c_f * slack),
        growth_ok=bool(growth.max() <= system.c_f * slack),
        n_samples=n_samples,
    )
    if system.is_driftless:
        alpha, beta = rng.normal(size=(2, n_samples, 1))
        combined = eval_dynamics(system, x, alpha * u + beta * w)
        separate = alpha * fx + beta * eval_dynamics(system, x, w)
        scale = 1.0 + np.abs(separate).max()
        error = float(np.abs(combined - separate).max() / scale)
        report.update(linearity_error=error, linearity_ok=error <= 1e-12)
    return SystemAuditReport(**report)


# ---------------------------------------------------------------------------
# Built-in systems
# ---------------------------------------------------------------------------

def _const_field(vector: Sequence[float]) -> VectorField:
    vector = np.asarray(vector, dtype=float)

    def _field(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(vector, x.shape).copy()
    return _field


def heisenberg() -> ControlSystemSpec:
    """x' = u, y' = v, z' = u y - v x."""
    def X1(p: np.ndarray) -> np.ndarray:
        one = np.ones(p.shape[:-1])
        return np.stack([one, 0.0 * one, p[..., 1]], axis=-1)

    def X2(p: np.ndarray) -> np.ndarray:
        one = np.ones(p.shape[:-1])
        return np.stack([0.0 * one, one, -p[..., 0]], axis=-1)

    return ControlSystemSpec(
        name="heisenberg", dimension=3, control_dimension=2, kind="driftless_affine",
        c_f=1.0, fields=(X1, X2),
        exact_brackets={(0, 1): _const_field([0.0, 0.0, -2.0]), (1, 0): _const_field([0.0, 0.0, 2.0])},
    )


def grushin(phi: Union[str, Polynomial, Callable] = "x", c_f: float = 1.0) -> ControlSystemSpec:
    """x' = u, y' = phi(x) v; phi is a polynomial in x (or a vectorized callable)."""
    if isinstance(phi, str):
        phi = compile_polynomial(phi, ("x",), {"x1": "x"})
    label = phi.text if isinstance(phi, Polynomial) else getattr(phi, "__name__", "phi")

    def phi_of(p: np.ndarray) -> np.ndarray:
        if isinstance(phi, Polynomial):
            return phi(p[..., :1])
        return np.asarray(phi(p[..., 0]), dtype=float) + np.zeros(p.shape[:-1])

    def X1(p: np.ndarray) -> np.ndarray:
        one = np.ones(p.shape[:-1])
        return np.stack([one, 0.0 * one], axis=-1)

    def X2(p: np.ndarray) -> np.ndarray:
        return np.stack([np.zeros(p.shape[:-1]), phi_of(p)], axis=-1)

    brackets = {}
    if isinstance(phi, Polynomial):
        def bracket(p: np.ndarray) -> np.ndarray:
            return np.stack([np.zeros(p.shape[:-1]), phi.gradient(p[..., :1])[..., 0]], axis=-1)

        def negated(p: np.ndarray) -> np.ndarray:
            return -bracket(p)
        brackets = {(0, 1): bracket, (1, 0): negated}

    return ControlSystemSpec(
        name=f"grushin(phi={label})", dimension=2, control_dimension=2, kind="driftless_affine",
        c_f=c_f, fields=(X1, X2), exact_brackets=brackets,
    )


def euclidean(dimension: int = 2) -> ControlSystemSpec:
    """x' = u with F = I (the flat metric)."""
    fields = tuple(_const_field(np.eye(dimension)[i]) for i in range(dimension))
    return ControlSystemSpec(
        name=f"euclidean{dimension}", dimension=dimension, control_dimension=dimension,
        kind="driftless_affine", c_f=1.0, fields=fields,
    )


def linear_system(A, B, u_star=None, c_f: Optional[float] = None, name: str = "linear") -> ControlSystemSpec:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    _check_linear_shapes(A, B)
    if c_f is None:
        # |Ax + Bu| <= max(|A|,|B|)(1+|u|)(1+|x|)
        c_f = float(max(np.linalg.norm(A, 2), np.linalg.norm(B, 2)))
    return ControlSystemSpec(
        name=name, dimension=A.shape[0], control_dimension=B.shape[1], kind="linear",
        c_f=c_f, A=A, B=B, u_star=u_star,
    )


def double_integrator() -> ControlSystemSpec:
    """Control of acceleration: x' = v, v' = u."""
    return linear_system([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], name="double-integrator")


def harmonic_oscillator(x_star: float = 0.0) -> ControlSystemSpec:
    """x' = v, v' = -x + u; (x*, 0) is stationary under u* = x*."""
    return linear_system([[0.0, 1.0], [-1.0, 0.0]], [[0.0], [1.0]], u_star=[x_star],
                         name="harmonic-oscillator")


SYSTEMS: Dict[str, Callable[..., ControlSystemSpec]] = {
    "heisenberg": heisenberg,
    "grushin": grushin,
    "euclidean": euclidean,
    "double_integrator": double_integrator,
    "harmonic_oscillator": harmonic_oscillator,
    "linear": linear_system,
}


def get_system(name: str, **kwargs) -> ControlSystemSpec:
    """Build a system by name, e.g. get_system("grushin", phi="x^2")."""
    if name not in SYSTEMS:
        raise InputError(f"Unknown system: {name}. Available: {list(SYSTEMS.keys())}")
    return SYSTEMS[name](**kwargs)


def system_from_config(cfg) -> ControlSystemSpec:
    """Build a system from a validated ``SystemConfig``."""
    if cfg.kind == "heisenberg":
        return heisenberg()
    if cfg.kind == "grushin":
        return grushin(cfg.phi, c_f=1.0 if cfg.c_f is None else cfg.c_f)
    if cfg.kind == "euclidean":
        return euclidean(cfg.dimension)
    if cfg.kind == "double_integrator":
        return double_integrator()
    if cfg.kind == "harmonic_oscillator":
        return harmonic_oscillator(cfg.x_star)
    return linear_system(cfg.A, cfg.B, u_star=cfg.u_star, c_f=cfg.c_f)
