"""
Error hierarchy shared by the numerical services and the CLI.

Every error carries a structured ``payload`` (logged and written into the run
summary) and the process ``exit_code`` the CLI maps it to.
"""
from typing import Any, Dict


class ErgodicHJBError(Exception):
    """Base class for all laboratory errors."""

    exit_code = 3

    def __init__(self, message: str, **payload: Any):
        self.message = message
        self.payload: Dict[str, Any] = payload
        super().__init__(message)

    def to_dict(self) -> Dict[str, Any]:
        return {"error_type": type(self).__name__, "error": self.message, **self.payload}


class InputError(ErgodicHJBError, ValueError):
    """Dimension mismatch, invalid grid, malformed expression."""

    exit_code = 2


class ModeError(InputError):
    """Requested evaluation mode is not available for the given specs."""


class SchemaError(InputError):
    """Experiment config does not validate; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}", path=path)


class DivergenceError(ErgodicHJBError):
    """A state, cost or value became non-finite."""

    def __init__(self, message: str, step: int = -1, node: int = -1):
        self.step = step
        self.node = node
        super().__init__(f"{message} (step={step}, node={node})", step=step, node=node)


class IterationLimitError(ErgodicHJBError):
    """A fixed-point iteration hit its iteration budget."""

    def __init__(self, message: str, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"{message} after {iterations} iterations (residual={residual:.3e})",
            iterations=iterations,
            residual=residual,
        )


class NonConvergenceError(ErgodicHJBError):
    """Penalty continuation ended with an endpoint residual above tolerance."""

    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual={residual:.3e})", residual=residual)


class ConsistencyError(ErgodicHJBError):
    """A property the discrete scheme must preserve was broken beyond tolerance."""
