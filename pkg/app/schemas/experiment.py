"""
Pydantic schemas for experiment configs.
One JSON file per experiment; schema_version must be 1. Command-line flags
override fields through ``apply_overrides``.
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.exceptions import InputError, SchemaError
from app.utils.expressions import radial_polynomial, state_control_polynomial, state_polynomial

TASKS = (
    "validate",
    "solve-vt",
    "solve-discounted",
    "sr-distance",
    "ball-box",
    "ergodic-estimate",
    "corrector",
    "lax-oleinik",
)
TaskName = Literal[
    "validate", "solve-vt", "solve-discounted", "sr-distance", "ball-box",
    "ergodic-estimate", "corrector", "lax-oleinik",
]


# ========== System ==========
class SystemConfig(BaseModel):
    """Built-in system by kind; ``linear`` takes explicit A and B"""

    kind: Literal["heisenberg", "grushin", "euclidean", "double_integrator", "harmonic_oscillator", "linear"]
    phi: str = Field("x", description="Grushin coefficient, a polynomial in x")
    dimension: int = Field(2, ge=1, le=3, description="Euclidean dimension")
    x_star: float = Field(0.0, description="Harmonic oscillator rest position (u* = x*)")
    A: Optional[List[List[float]]] = None
    B: Optional[List[List[float]]] = None
    u_star: Optional[List[float]] = None
    c_f: Optional[float] = Field(None, ge=0, description="Growth/Lipschitz constant; derived when omitted")

    @field_validator("phi")
    @classmethod
    def phi_is_polynomial(cls, v: str) -> str:
        state_polynomial(v, 1)
        return v

    @model_validator(mode="after")
    def linear_needs_matrices(self):
        if self.kind == "linear" and (self.A is None or self.B is None):
            raise ValueError("linear systems need both A and B")
        return self

    @property
    def state_dimension(self) -> int:
        if self.kind == "heisenberg":
            return 3
        if self.kind == "euclidean":
            return self.dimension
        if self.kind == "linear":
            return len(self.A)
        return 2

    @property
    def control_dimension(self) -> int:
        if self.kind in ("heisenberg", "grushin"):
            return 2
        if self.kind == "euclidean":
            return self.dimension
        if self.kind == "linear":
            return len(self.B[0])
        return 1


# ========== Lagrangian ==========
class LagrangianConfig(BaseModel):
    kind: Literal["quadratic_plus_potential", "generic"] = "quadratic_plus_potential"
    g: Optional[str] = Field(None, description="Potential for the quadratic kind")
    L: Optional[str] = Field(None, description="Full cost in x, y, z, u1..um for the generic kind")
    u_star: Optional[List[float]] = None
    x_star: Optional[List[float]] = None
    ell1: float = Field(1.0, gt=0)
    theta: float = Field(0.5, gt=0)
    K_radius: float = Field(1.0, ge=0)
    beta: Optional[Union[str, float, List[List[float]]]] = Field(None, description="Expression in r or [[r, value], ...]")
    normalized: bool = Field(False, description="Declares (L3'): L(x*, 0) = 0 and L(., 0) > 0 off K")
    shift: float = Field(0.0, description="Constant added to L")

    @model_validator(mode="after")
    def expression_for_kind(self):
        if self.kind == "quadratic_plus_potential" and self.g is None:
            raise ValueError("quadratic_plus_potential needs g")
        if self.kind == "generic" and self.L is None:
            raise ValueError("generic Lagrangians need L")
        if isinstance(self.beta, str):
            radial_polynomial(self.beta)
        return self


# ========== Grid and solver ==========
class GridConfig(BaseModel):
    lower: List[float] = Field(..., min_length=1, max_length=3)
    upper: List[float] = Field(..., min_length=1, max_length=3)
    nodes: Union[int, List[int]] = 41

    @model_validator(mode="after")
    def box_is_valid(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper must have the same length")
        nodes = self.node_list()
        if len(nodes) != len(self.lower):
            raise ValueError("nodes must be one count or one per axis")
        if any(n < 3 for n in nodes):
            raise ValueError("grid needs at least 3 nodes per axis")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ValueError("upper corner must exceed lower corner on every axis")
        return self

    def node_list(self) -> List[int]:
        if isinstance(self.nodes, int):
            return [self.nodes] * len(self.lower)
        return list(self.nodes)


class SolverSettings(BaseModel):
    dt: Optional[float] = Field(None, gt=0)
    control_radius: float = Field(3.0, gt=0)
    control_points: int = Field(21, ge=2)
    boundary: Literal["extend_linear", "clamp"] = "extend_linear"
    tolerance: float = Field(1e-6, gt=0)
    max_iterations: int = Field(200000, ge=1)


# ========== Task ==========
class TaskParams(BaseModel):
    """Parameters read by the task handlers; each handler uses its own subset"""

    T: float = Field(5.0, gt=0)
    T_list: List[float] = Field(default_factory=lambda: [5.0, 10.0, 20.0])
    lam: float = Field(0.2, gt=0)
    lambda_list: List[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05])
    lambda_sequence: List[float] = Field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05])
    probes: Optional[List[List[float]]] = None
    R: float = Field(1.0, gt=0)
    from_point: Optional[List[float]] = None
    to_point: Optional[List[float]] = None
    direction: Optional[List[float]] = None
    n_pairs: int = Field(64, ge=2)
    restarts: int = Field(8, ge=1)
    N: int = Field(32, ge=1)
    n_samples: int = Field(10000, ge=1)
    sample_box: Optional[List[List[float]]] = None
    t: float = Field(1.0, ge=0)
    t_step: float = Field(0.5, gt=0)
    max_time: float = Field(50.0, gt=0)
    diagnostics: bool = False
    lipschitz_bases: int = Field(2, ge=0)

    @field_validator("T_list", "lambda_list", "lambda_sequence")
    @classmethod
    def positive_entries(cls, v: List[float]) -> List[float]:
        if not v or any(x <= 0 for x in v):
            raise ValueError("entries must be positive")
        return v


class ExperimentConfig(BaseModel):
    schema_version: Literal[1] = 1
    name: Optional[str] = None
    task: TaskName
    system: SystemConfig
    lagrangian: LagrangianConfig
    grid: Optional[GridConfig] = None
    solver: SolverSettings = Field(default_factory=SolverSettings)
    params: TaskParams = Field(default_factory=TaskParams)
    seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None
    tolerances: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def dimensions_agree(self):
        d = self.system.state_dimension
        m = self.system.control_dimension
        lag = self.lagrangian
        if lag.x_star is not None and len(lag.x_star) != d:
            raise ValueError(f"lagrangian.x_star must have {d} entries")
        if lag.u_star is not None and len(lag.u_star) != m:
            raise ValueError(f"lagrangian.u_star must have {m} entries")
        if self.grid is not None and len(self.grid.lower) != d:
            raise ValueError(f"grid must have dimension {d}")
        if lag.kind == "generic":
            state_control_polynomial(lag.L, d, m)
        else:
            state_polynomial(lag.g, d)
        return self


def _error_path(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error.get("loc", ())) or "<root>"


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a config mapping; the first error becomes a SchemaError naming its field."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        message = first.get("msg", "invalid value")
        ctx_error = first.get("ctx", {}).get("error")
        if isinstance(ctx_error, InputError):
            message = ctx_error.message
        raise SchemaError(_error_path(first), message) from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SchemaError("<file>", f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(data)


def apply_overrides(config: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """Flags override config fields; ``params.X`` keys reach into TaskParams."""
    data = config.model_dump()
    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("params."):
            data["params"][key.split(".", 1)[1]] = value
        else:
            data[key] = value
    return parse_config(data)
