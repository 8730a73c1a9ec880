# Exceptions raised by the reconstruction engine

from typing import Optional


class ReconstructionError(Exception):
    """Base class for every error raised by the reconstruction engine."""


class ConfigurationError(ReconstructionError, ValueError):
    """
    Invalid geometry, depth or run configuration.

    When the error comes from a config file, `section`, `key` and the
    1-based `line` point at the offending entry.
    """

    def __init__(self, message: str, section: Optional[str] = None,
                 key: Optional[str] = None, line: Optional[int] = None):
        self.section = section
        self.key = key
        self.line = line
        if section is not None:
            location = f"[{section}] {key}" if key else f"[{section}]"
            message = f"{location}: {message}"
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ContractViolation(ReconstructionError, ValueError):
    """Dimension mismatch or malformed layout handed to an operation."""


class NumericalError(ReconstructionError, ArithmeticError):
    """
    Non-finite or out-of-range value.

    `index` is the ray, voxel or coefficient index where it was detected.
    `solver` and `iteration` are filled in once the error propagates through
    a solver run.
    """

    def __init__(self, message: str, index: Optional[int] = None,
                 solver: Optional[str] = None, iteration: Optional[int] = None):
        self.detail = message
        self.index = index
        self.solver = solver
        self.iteration = iteration
        super().__init__(self._format())

    def _format(self) -> str:
        parts = []
        if self.solver is not None:
            parts.append(f"solver {self.solver}")
        if self.iteration is not None:
            parts.append(f"iteration {self.iteration}")
        prefix = ", ".join(parts)
        where = f" (index {self.index})" if self.index is not None else ""
        return f"{prefix}: {self.detail}{where}" if prefix else f"{self.detail}{where}"

    def within(self, solver: str, iteration: int) -> "NumericalError":
        """Return a copy annotated with the solver name and iteration."""
        return NumericalError(self.detail, index=self.index, solver=solver, iteration=iteration)
