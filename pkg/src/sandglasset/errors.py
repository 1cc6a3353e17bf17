"""Exception types shared across the package."""


class SandglassetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(SandglassetError):
    """Operands disagree on shape, dtype, or rank."""


class LayoutError(SandglassetError):
    """A tensor does not match the frame/segment layout it is used with."""


class ConfigError(SandglassetError):
    """Invalid or inconsistent configuration value."""


class DomainError(SandglassetError):
    """Input is outside the mathematical domain of an operation."""


class NumericError(SandglassetError):
    """Non-finite values encountered where finite values are required."""
