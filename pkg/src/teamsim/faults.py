"""Fault injection plans: which rank sleeps, when, and for how long.

Plans are plain lists of :class:`~teamsim.netsim.FaultEvent` and are pure
functions of their policies and seed.  Sleeping is modelled as a pause
of the rank's whole process.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import DomainError
from .netsim import FaultEvent, FaultKind
from .topology import RankAddress, WorldConfig

DEFAULT_SCALE = 10.0


class SelectionKind(str, Enum):
    CONSTANT = "constant"
    ROUND_ROBIN = "round_robin"
    RANDOM = "random"


@dataclass(frozen=True)
class SelectionPolicy:
    """Which rank receives each injection.

    ``candidates`` restricts round-robin and random choice; by default it is
    every rank of the world.  For the "same team rank, different team"
    variant pass the replicas of one team rank as candidates.
    """

    kind: SelectionKind
    target: RankAddress | None = None
    candidates: tuple[RankAddress, ...] = ()

    @classmethod
    def constant(cls, target: RankAddress) -> "SelectionPolicy":
        return cls(SelectionKind.CONSTANT, target)

    @classmethod
    def round_robin(cls, candidates: Iterable[RankAddress]) -> "SelectionPolicy":
        return cls(SelectionKind.ROUND_ROBIN, candidates=tuple(candidates))

    @classmethod
    def random(cls, candidates: Iterable[RankAddress]) -> "SelectionPolicy":
        return cls(SelectionKind.RANDOM, candidates=tuple(candidates))

    @classmethod
    def across_teams(cls, team_rank: int, world: WorldConfig, kind: SelectionKind = SelectionKind.ROUND_ROBIN) -> "SelectionPolicy":
        cands = tuple(world.address(t, team_rank) for t in range(world.num_teams))
        return cls(SelectionKind(kind), candidates=cands)

    def __post_init__(self):
        object.__setattr__(self, "kind", SelectionKind(self.kind))
        if self.kind is SelectionKind.CONSTANT and self.target is None:
            raise DomainError("constant selection needs a target")
        if self.kind is not SelectionKind.CONSTANT and not self.candidates:
            raise DomainError(f"{self.kind.value} selection needs candidates")

    def targets(self, count: int, rng: random.Random) -> list[RankAddress]:
        if self.kind is SelectionKind.CONSTANT:
            return [self.target] * count
        if self.kind is SelectionKind.ROUND_ROBIN:
            return [self.candidates[i % len(self.candidates)] for i in range(count)]
        return [rng.choice(self.candidates) for _ in range(count)]


class FrequencyKind(str, Enum):
    CONSTANT = "constant"
    DECREASING = "decreasing"
    RANDOM = "random"


@dataclass(frozen=True)
class FrequencyPolicy:
    """Gaps between consecutive injections.

    ``Decreasing`` multiplies the gap by ``factor`` after every event until
    it falls below ``min_interval`` (default ``initial / 32``), which keeps
    the geometric series from piling infinitely many events into the window.
    ``Random`` draws each gap uniformly from ``[lo, hi]``.
    """

    kind: FrequencyKind
    interval: float = 0.0
    factor: float = 0.5
    lo: float = 0.0
    hi: float = 0.0
    min_interval: float | None = None

    @classmethod
    def constant(cls, interval: float) -> "FrequencyPolicy":
        return cls(FrequencyKind.CONSTANT, interval=interval)

    @classmethod
    def decreasing(cls, initial: float, factor: float, min_interval: float | None = None) -> "FrequencyPolicy":
        return cls(FrequencyKind.DECREASING, interval=initial, factor=factor, min_interval=min_interval)

    @classmethod
    def random(cls, lo: float, hi: float) -> "FrequencyPolicy":
        return cls(FrequencyKind.RANDOM, lo=lo, hi=hi)

    def __post_init__(self):
        object.__setattr__(self, "kind", FrequencyKind(self.kind))
        if self.kind is FrequencyKind.RANDOM:
            if not 0 < self.lo <= self.hi:
                raise DomainError(f"random frequency needs 0 < lo <= hi, got [{self.lo}, {self.hi}]")
        elif not self.interval > 0:
            raise DomainError(f"interval must be > 0, got {self.interval}")
        if self.kind is FrequencyKind.DECREASING and not 0 < self.factor < 1:
            raise DomainError(f"decreasing factor must lie in (0, 1), got {self.factor}")

    def times(self, t0: float, t1: float, rng: random.Random) -> list[float]:
        out = []
        if self.kind is FrequencyKind.RANDOM:
            t = t0 + rng.uniform(self.lo, self.hi)
            while t <= t1:
                out.append(t)
                t += rng.uniform(self.lo, self.hi)
            return out
        floor = self.interval / 32 if self.min_interval is None else self.min_interval
        gap = self.interval
        t = t0 + gap
        while t <= t1:
            out.append(t)
            if self.kind is FrequencyKind.DECREASING:
                gap *= self.factor
                if gap < floor:
                    break
            t += gap
        return out


def schedule_injections(
    sel: SelectionPolicy,
    freq: FrequencyPolicy,
    pause: float,
    window: tuple[float, float],
    seed: int = 0,
) -> list[FaultEvent]:
    """Pause events inside the closed window ``[t0, t1]``."""
    t0, t1 = window
    if t1 <= t0:
        return []
    rng = random.Random(seed)
    times = freq.times(t0, t1, rng)
    targets = sel.targets(len(times), rng)
    return [FaultEvent.pause(r, t, pause) for t, r in zip(times, targets)]


@dataclass(frozen=True)
class EscalatingDelayPlan:
    start_time: float
    initial_pause: float
    increment: float
    target: RankAddress
    cadence: float = 1.0

    def __post_init__(self):
        if self.start_time < 0 or self.initial_pause <= 0 or self.increment < 0 or self.cadence <= 0:
            raise DomainError(f"invalid escalating plan {self}")


def escalating_delay_plan(p: EscalatingDelayPlan, run_end: float) -> list[FaultEvent]:
    """Pauses of ``initial, initial + inc, ...`` on one rank.

    Consecutive pauses are one cadence of the target's own progress apart:
    the next pause lands ``cadence`` after the previous one has ended, so
    each of the target's heartbeat intervals absorbs one pause instead of
    pauses stacking up into a permanent stall.
    """
    out = []
    t = p.start_time
    k = 0
    while t <= run_end:
        d = p.initial_pause + k * p.increment
        out.append(FaultEvent.pause(p.target, t, d))
        t += d + p.cadence
        k += 1
    return out


def startup_delay(target: RankAddress, lo: float, hi: float, seed: int = 0) -> FaultEvent:
    """One pause at t=0 on ``target`` with a duration uniform in ``[lo, hi]``."""
    if lo > hi or lo <= 0:
        raise DomainError(f"startup delay needs 0 < lo <= hi, got [{lo}, {hi}]")
    duration = lo if lo == hi else random.Random(seed).uniform(lo, hi)
    return FaultEvent.pause(target, 0.0, duration)


def scaled(value: float, scale: float = DEFAULT_SCALE) -> float:
    """Full-size virtual time divided by the desk-scale factor."""
    if scale <= 0:
        raise DomainError(f"scale must be > 0, got {scale}")
    return value / scale


def plan_to_json(plan: Sequence[FaultEvent]) -> str:
    return json.dumps([e.to_json() for e in plan], indent=2, sort_keys=True) + "\n"


def plan_from_json(text: str, world: WorldConfig) -> list[FaultEvent]:
    out = []
    for row in json.loads(text):
        target = world.address(row["team"], row["team_rank"])
        out.append(FaultEvent(FaultKind(row["kind"]), target, row["at"], row.get("duration", 0.0)))
    return out
