"""Team-based process replication with heartbeats and task outcome sharing,
simulated in deterministic virtual time."""

from .errors import ConfigError, DomainError, SimulationError, TeamsimError
from .topology import RankAddress, WorldConfig, map_world_rank, replicas_of

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "RankAddress",
    "SimulationError",
    "TeamsimError",
    "WorldConfig",
    "map_world_rank",
    "replicas_of",
]
