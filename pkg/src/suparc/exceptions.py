"""Exception hierarchy shared across the package."""


class SupArcError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SupArcError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SupArcError, ValueError):
    """A caller violated an operation's precondition."""


class DegenerateInputError(SupArcError, ValueError):
    """Input has no usable direction (e.g. an all-zero vector)."""


class EmptyPositiveError(SupArcError, ValueError):
    """No anchor in the batch has an in-batch positive."""


class DataError(SupArcError, ValueError):
    """Malformed or out-of-range dataset content."""


class ConfigError(SupArcError, ValueError):
    """Invalid configuration value."""


class NonFiniteLossError(SupArcError, ArithmeticError):
    """A loss component evaluated to NaN or Inf."""

    def __init__(self, component, value):
        self.component = component
        self.value = value
        super().__init__(f"non-finite {component} loss: {value!r}")
