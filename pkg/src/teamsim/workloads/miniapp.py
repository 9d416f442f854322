"""Barrier-coupled compute loop with single or dual heartbeats.

Every iteration is ``barrier; compute; barrier``.  In dual mode the compute
region is bracketed by ``heartbeat(+1)`` / ``heartbeat(-1)`` so the measured
interval excludes barrier waits and a slow rank can be singled out.  In
single mode one ``heartbeat(0)`` per iteration measures the whole loop body,
barrier waits included, so every rank of a slowed team looks slow.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from ..errors import ConfigError
from ..heartbeat import DetectorParams, Health, HeartbeatNetwork, IntervalRow
from ..netsim import Channel, Compute, FaultEvent, LatencyModel, Recv, Simulator
from ..topology import RankAddress, WorldConfig


class HeartbeatMode(str, Enum):
    SINGLE = "single"
    DUAL = "dual"


@dataclass(frozen=True)
class MiniappConfig:
    iterations: int = 100
    work_per_iter: float = 0.4
    heartbeat_mode: HeartbeatMode = HeartbeatMode.DUAL
    ranks_per_team: int = 2
    dt_hb: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "heartbeat_mode", HeartbeatMode(self.heartbeat_mode))
        if self.iterations < 1 or self.work_per_iter <= 0 or self.ranks_per_team < 1:
            raise ConfigError(f"invalid miniapp config {self}")

    @property
    def section(self) -> int:
        return 1 if self.heartbeat_mode is HeartbeatMode.DUAL else 0


@dataclass
class MiniappReport:
    mode: HeartbeatMode
    rows: list[IntervalRow]
    intervals: dict[RankAddress, list[float]]
    flagged: set[RankAddress]
    lengthened: set[RankAddress]
    heartbeat_counts: dict[int, int]
    protocol_errors: int = 0
    finish_time: dict[int, float] = field(default_factory=dict)


def _barrier(sim: Simulator, me: RankAddress, members: Sequence[RankAddress], tag: int):
    root = members[0]
    if len(members) == 1:
        return
    if me == root:
        for m in members[1:]:
            yield Recv(Channel.INTRA_TEAM, tag, m)
        for m in members[1:]:
            sim.post_send(me, m, Channel.INTRA_TEAM, tag)
    else:
        sim.post_send(me, root, Channel.INTRA_TEAM, tag)
        yield Recv(Channel.INTRA_TEAM, tag, root)


def lengthened_ranks(intervals: dict[RankAddress, list[float]], factor: float = 1.5) -> set[RankAddress]:
    """Ranks with at least one interval ``factor`` times the overall median."""
    everything = [v for xs in intervals.values() for v in xs]
    if not everything:
        return set()
    median = statistics.median(everything)
    return {a for a, xs in intervals.items() if xs and max(xs) > factor * median}


def run_miniapp(
    cfg: MiniappConfig,
    world: WorldConfig,
    plan: Sequence[FaultEvent] = (),
    latency: LatencyModel | None = None,
    params: DetectorParams | None = None,
    seed: int = 0,
) -> MiniappReport:
    if world.team_size != cfg.ranks_per_team:
        raise ConfigError(f"world has {world.team_size} ranks per team, config says {cfg.ranks_per_team}")
    sim = Simulator(world, latency, seed=seed)
    params = params or DetectorParams(dt_hb=cfg.dt_hb)
    net = HeartbeatNetwork(sim, params)
    dual = cfg.heartbeat_mode is HeartbeatMode.DUAL
    finish: dict[int, float] = {}

    def program(me: RankAddress):
        members = [world.address(me.team, r) for r in range(world.team_size)]
        hb = net.monitor(me)
        for it in range(cfg.iterations):
            yield from _barrier(sim, me, members, 2 * it)
            if dual:
                hb.heartbeat(+1)
            else:
                hb.heartbeat(0)
            yield Compute(cfg.work_per_iter)
            if dual:
                hb.heartbeat(-1)
            yield from _barrier(sim, me, members, 2 * it + 1)
        hb.stop()
        finish[me.team] = max(finish.get(me.team, 0.0), sim.now)

    for addr in world.addresses():
        sim.spawn(addr, program(addr))
    for fault in plan:
        sim.inject_fault(fault)
    sim.run_until()

    section = cfg.section
    intervals = {
        m.addr: list(m.local[section].intervals) if section in m.local else []
        for m in net.monitors.values()
    }
    return MiniappReport(
        mode=cfg.heartbeat_mode,
        rows=net.rows,
        intervals=intervals,
        flagged=net.ever_flagged(Health.SLOW),
        lengthened=lengthened_ranks(intervals),
        heartbeat_counts=net.heartbeat_counts(),
        protocol_errors=sum(m.protocol_errors for m in net.monitors.values()),
        finish_time=finish,
    )
