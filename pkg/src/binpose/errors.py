"""Exception types shared across the package; the CLI maps them to exit codes."""


class ContractError(ValueError):
    """An argument violates a documented shape or range contract."""


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class DataError(RuntimeError):
    """Missing, inconsistent or unreadable on-disk data."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during training."""


class SettleError(RuntimeError):
    """A scene could not be settled within its retry budget."""
