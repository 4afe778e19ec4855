class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class ConfigurationError(ValueError):
    """Raised for inconsistent model, training or pipeline configuration."""


class ContractViolationError(RuntimeError):
    """Raised when a runtime invariant (e.g. the freeze ledger) is broken."""
