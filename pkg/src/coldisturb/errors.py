"""Exception types raised across the toolkit."""


class ColdisturbError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ColdisturbError, ValueError):
    """Invalid geometry, distribution, grid, or run configuration."""


class InputError(ColdisturbError, ValueError):
    """An argument is out of range or inconsistent with the array."""


class ProtocolError(ColdisturbError):
    """A command stream violates ACT/PRE/REF ordering rules."""


class ModelDomainError(ColdisturbError, ValueError):
    """An analytic model was evaluated outside its domain."""


class ModeError(ColdisturbError, ValueError):
    """The requested evaluation mode is infeasible (e.g. exhaustive too large)."""
