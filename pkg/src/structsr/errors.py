"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument or config value is outside its allowed range."""


class ShapeError(ValueError):
    """Tensor/array arguments have incompatible shapes."""


class NumericalDomainError(ArithmeticError):
    """A computation would divide by a vanishing coefficient."""


class TrainingError(RuntimeError):
    """Training produced a non-finite quantity; message carries diagnostics."""
