"""Exception types shared across the package."""


class UsageError(ValueError):
    """A caller violated an operation's precondition."""


class ShapeMismatchError(UsageError):
    """Input shapes do not satisfy a primitive's shape rule."""

    def __init__(self, node_name, message):
        super().__init__(f"{node_name}: {message}")
        self.node_name = node_name


class GraphUsageError(UsageError):
    """Graph API misuse (unbound leaf, backward before forward, ...)."""


class NumericFaultError(ArithmeticError):
    """A primitive produced NaN or Inf."""

    def __init__(self, node_name, message="non-finite values in output"):
        super().__init__(f"{node_name}: {message}")
        self.node_name = node_name


class VolumeFormatError(ValueError):
    """Volume header/payload on disk is malformed or inconsistent."""


class ConfigError(ValueError):
    """Run configuration failed validation; message names the field."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingAbort(RuntimeError):
    """Training stopped on a numeric fault; message names the loss term."""
