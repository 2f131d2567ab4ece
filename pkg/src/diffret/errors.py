"""Exception taxonomy shared by all modules."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class InputError(ValueError):
    """Invalid runtime input (bad token, out-of-range timestep, ...)."""


class NumericError(RuntimeError):
    """Non-finite values encountered during computation."""


class UsageError(RuntimeError):
    """Missing or mismatched artifacts, stale caches, wrong call order."""
