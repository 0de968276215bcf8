"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A configuration value violates its contract.

    ``field`` names the offending key when one applies.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class OracleError(RuntimeError):
    """A coalition value oracle failed on a specific subset."""

    def __init__(self, subset, cause):
        super().__init__(f"value oracle failed on subset mask {subset:#b}: {cause!r}")
        self.subset = subset
        self.cause = cause


class TrainingDivergenceError(FloatingPointError):
    """A loss component became non-finite."""

    def __init__(self, component, value):
        super().__init__(f"loss component {component!r} is non-finite ({value})")
        self.component = component
        self.value = value
