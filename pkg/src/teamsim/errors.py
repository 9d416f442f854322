"""Exception hierarchy shared by every teamsim module."""


class TeamsimError(Exception):
    """Base class for all teamsim errors."""


class ConfigError(TeamsimError, ValueError):
    """Raised for an invalid or inconsistent configuration."""


class DomainError(TeamsimError, ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class SimulationError(TeamsimError, RuntimeError):
    """Raised when the event loop detects a broken internal invariant."""
