"""Mapping of a flat pool of world ranks onto equally sized teams.

Teams are contiguous blocks: with ``R`` ranks per team, team ``T`` owns
world ranks ``[T*R, (T+1)*R)``.  A rank's replicas are the ranks with the
same team rank in every other team.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class WorldConfig:
    world_size: int
    num_teams: int

    def __post_init__(self):
        if self.world_size < 1 or self.num_teams < 1:
            raise ConfigError(
                f"world_size and num_teams must be >= 1, got {self.world_size}, {self.num_teams}"
            )
        if self.world_size % self.num_teams:
            raise ConfigError(
                f"world_size {self.world_size} is not divisible by num_teams {self.num_teams}"
            )

    @classmethod
    def from_teams(cls, num_teams: int, team_size: int) -> "WorldConfig":
        if team_size < 1:
            raise ConfigError(f"team_size must be >= 1, got {team_size}")
        return cls(launch_size(team_size, num_teams), num_teams)

    @property
    def team_size(self) -> int:
        return self.world_size // self.num_teams

    def addresses(self) -> list["RankAddress"]:
        return [map_world_rank(w, self) for w in range(self.world_size)]

    def address(self, team: int, team_rank: int) -> "RankAddress":
        if not (0 <= team < self.num_teams and 0 <= team_rank < self.team_size):
            raise DomainError(f"no rank (team={team}, team_rank={team_rank}) in {self}")
        return RankAddress(team * self.team_size + team_rank, team, team_rank)


@dataclass(frozen=True, order=True)
class RankAddress:
    world_rank: int
    team: int
    team_rank: int

    def __str__(self):
        return f"r{self.team_rank}@t{self.team}"


def map_world_rank(world_rank: int, cfg: WorldConfig) -> RankAddress:
    if not 0 <= world_rank < cfg.world_size:
        raise DomainError(f"world rank {world_rank} outside [0, {cfg.world_size})")
    team_size = cfg.team_size
    return RankAddress(world_rank, world_rank // team_size, world_rank % team_size)


def _check(addr: RankAddress, cfg: WorldConfig) -> None:
    if map_world_rank(addr.world_rank, cfg) != addr:
        raise DomainError(f"{addr!r} is not a valid address under {cfg}")


def replicas_of(addr: RankAddress, cfg: WorldConfig) -> list[RankAddress]:
    """All ranks holding the same team rank in the other ``K-1`` teams."""
    _check(addr, cfg)
    return [cfg.address(team, addr.team_rank) for team in range(cfg.num_teams) if team != addr.team]


def team_members(team: int, cfg: WorldConfig) -> list[RankAddress]:
    return [cfg.address(team, r) for r in range(cfg.team_size)]


def launch_size(ranks_per_team: int, num_teams: int) -> int:
    """Number of processes to start, e.g. ``mpiexec -np launch_size(10, 3)``."""
    if ranks_per_team < 1 or num_teams < 1:
        raise DomainError("ranks_per_team and num_teams must be >= 1")
    return ranks_per_team * num_teams


class Protocol(str, Enum):
    MIRROR = "mirror"
    PARALLEL = "parallel"


def protocol_message_count(m: int, r: int, c: int, protocol: Protocol | str) -> int:
    """Messages sent by the classical consistency protocols.

    ``m`` application messages, replication factor ``r``, ``c`` extra
    consistency messages.  Mirror duplicates to all replicas (``m*r**2 + c``);
    parallel only talks to the corresponding replica (``m*r + c``).
    """
    if m < 0 or r < 0 or c < 0:
        raise DomainError("m, r and c must be non-negative")
    protocol = Protocol(protocol)
    if protocol is Protocol.MIRROR:
        return m * r * r + c
    return m * r + c
