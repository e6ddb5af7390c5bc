"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class LightError(Exception):
    exit_code = 1


class ConfigError(LightError, ValueError):
    """Invalid configuration value. ``field`` names the offending entry."""

    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(LightError, OSError):
    exit_code = 3


class ShapeError(LightError, ValueError):
    exit_code = 2


class NumericalError(LightError, ArithmeticError):
    """Non-finite training loss. ``part`` names the loss component."""

    exit_code = 4

    def __init__(self, part, message=None):
        self.part = part
        super().__init__(message or f"non-finite loss in part {part!r}")
