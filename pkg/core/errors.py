"""Exception hierarchy shared by the numerical kernels, the trainer and the CLI."""


class OrthoCondError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(OrthoCondError, ValueError):
    """Input shapes do not conform."""


class DomainError(OrthoCondError, ValueError):
    """Input lies outside the mathematical domain of the operation."""


class SolverError(OrthoCondError, RuntimeError):
    """An iterative solver did not converge or diverged."""

    def __init__(self, message: str, residual: float, iterations: int) -> None:
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class SingularGradientError(OrthoCondError, ArithmeticError):
    """Exact duplicate eigenvalues make the unregularized gradient undefined."""


class DegenerateGradientError(OrthoCondError, ValueError):
    """The gradient is zero, so a gradient treatment cannot be applied."""


class ConfigError(OrthoCondError, ValueError):
    """Invalid configuration, dataset spec or treatment policy."""


class TraceFormatError(OrthoCondError, ValueError):
    """A trace file could not be parsed."""

    def __init__(self, path: str, line: int, reason: str) -> None:
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason
