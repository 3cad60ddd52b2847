"""
Polynomial expression grammar used by experiment configs.

    g     = "x^2 + y^2"          potential of a quadratic Lagrangian
    phi   = "x"                  Grushin coefficient
    L     = "1 + 0.5*u1^2"       generic Lagrangian (state + control symbols)
    beta  = "1 + r^2"            bound function of (L1)

State symbols are x, y, z (aliases x1, x2, x3; x1..xd only when d > 3),
control symbols u1..um, the beta variable is r. '^' and '**' are powers.
Anything that is not a polynomial in the allowed symbols is rejected.
"""
import re
from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

import numpy as np
import sympy
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

from app.exceptions import InputError

_TRANSFORMS = standard_transformations + (convert_xor,)
_ALLOWED_TEXT = re.compile(r"^[0-9A-Za-z_+\-*/^().\s]+$")
STATE_NAMES = ("x", "y", "z")


@dataclass(frozen=True)
class Polynomial:
    """Compiled polynomial evaluated on arrays of shape (..., n_variables)."""

    text: str
    expr: sympy.Expr
    variables: Tuple[str, ...]
    _func: Callable
    _grad: Tuple[Callable, ...]

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        columns = [points[..., i] for i in range(self.n_variables)]
        value = self._func(*columns)
        return np.asarray(value, dtype=float) + np.zeros(points.shape[:-1])

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Exact gradient, shape (..., n_variables)."""
        points = np.asarray(points, dtype=float)
        columns = [points[..., i] for i in range(self.n_variables)]
        parts = [np.asarray(g(*columns), dtype=float) + np.zeros(points.shape[:-1]) for g in self._grad]
        return np.stack(parts, axis=-1)


def compile_polynomial(text: str, variables: Sequence[str], aliases: Dict[str, str] = None) -> Polynomial:
    """Parse ``text`` under a closed symbol table and compile it for numpy."""
    if not isinstance(text, str) or not text.strip():
        raise InputError("expression must be a non-empty string", expression=text)
    if not _ALLOWED_TEXT.match(text) or "__" in text:
        raise InputError(f"expression {text!r} contains characters outside the polynomial grammar", expression=text)

    symbols = {name: sympy.Symbol(name, real=True) for name in variables}
    local_dict = dict(symbols)
    for alias, target in (aliases or {}).items():
        local_dict[alias] = symbols[target]

    try:
        expr = parse_expr(text, local_dict=local_dict, transformations=_TRANSFORMS)
    except (SyntaxError, TypeError, ValueError, sympy.SympifyError) as exc:
        raise InputError(f"could not parse expression {text!r}: {exc}", expression=text) from exc

    if not isinstance(expr, sympy.Expr):
        raise InputError(f"expression {text!r} is not arithmetic", expression=text)

    ordered = [symbols[name] for name in variables]
    unknown = expr.free_symbols - set(ordered)
    if unknown:
        names = ", ".join(sorted(str(s) for s in unknown))
        raise InputError(
            f"expression {text!r} uses unknown symbols: {names} (allowed: {', '.join(local_dict)})",
            expression=text,
        )
    if not expr.is_polynomial(*ordered):
        raise InputError(f"expression {text!r} is not a polynomial in {', '.join(variables)}", expression=text)

    func = sympy.lambdify(ordered, expr, modules="numpy")
    grad = tuple(sympy.lambdify(ordered, sympy.diff(expr, s), modules="numpy") for s in ordered)
    return Polynomial(text=text, expr=expr, variables=tuple(variables), _func=func, _grad=grad)


def _state_table(dimension: int) -> Tuple[Tuple[str, ...], Dict[str, str]]:
    if dimension <= len(STATE_NAMES):
        names = STATE_NAMES[:dimension]
        aliases = {f"x{i + 1}": names[i] for i in range(dimension)}
        return names, aliases
    return tuple(f"x{i + 1}" for i in range(dimension)), {}


def state_polynomial(text: str, dimension: int) -> Polynomial:
    """Polynomial in the state coordinates."""
    names, aliases = _state_table(dimension)
    return compile_polynomial(text, names, aliases)


def state_control_polynomial(text: str, dimension: int, control_dimension: int) -> Polynomial:
    """Polynomial in the state followed by the control coordinates u1..um."""
    names, aliases = _state_table(dimension)
    controls = tuple(f"u{i + 1}" for i in range(control_dimension))
    return compile_polynomial(text, names + controls, aliases)


def radial_polynomial(text: str) -> Polynomial:
    """Polynomial in the radius r (used for the beta bound)."""
    return compile_polynomial(text, ("r",))
