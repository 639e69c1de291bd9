"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NotSymmetricError(ValueError):
    """A routine that requires a symmetric matrix received an asymmetric one."""


class NotPositiveDefiniteError(ValueError):
    """A matrix failed a positive (semi-)definiteness requirement."""


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap.

    ``residual`` holds the last measured residual (``None`` if not applicable).
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateSpectrumError(ArithmeticError):
    """Singular values needed for a gradient are (numerically) tied."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""
