"""Intra-team ping-pong between team ranks 0 and 1, run in every team at once.

Used to show that splitting the world into teams costs no intra-team
bandwidth and that only heartbeats cross between replicas.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConfigError
from ..heartbeat import DetectorParams, HeartbeatNetwork
from ..netsim import Channel, LatencyModel, Recv, Simulator
from ..topology import WorldConfig


@dataclass(frozen=True)
class PingPongConfig:
    n_min: int = 1
    n_max: int = 1 << 20
    i_max: int = 100
    trials: int = 25

    def __post_init__(self):
        if self.i_max < 1 or self.trials < 1:
            raise ConfigError("i_max and trials must be >= 1")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")

    def sizes(self) -> list[int]:
        out, n = [], self.n_min
        while n <= self.n_max:
            out.append(n)
            n *= 2
        return out


@dataclass
class BandwidthReport:
    sizes: list[int]
    # per team, one value per size: best over trials
    bandwidth: dict[int, list[float]] = field(default_factory=dict)
    rate: dict[int, list[float]] = field(default_factory=dict)
    intra_team_messages: dict[int, int] = field(default_factory=dict)
    inter_replica_messages: int = 0
    heartbeat_messages: int = 0
    task_share_messages: int = 0
    heartbeats_emitted: int = 0

    CSV_HEADER = ("size", "team", "bandwidth", "rate")

    def rows(self) -> list[tuple]:
        return [
            (n, team, self.bandwidth[team][i], self.rate[team][i])
            for team in sorted(self.bandwidth)
            for i, n in enumerate(self.sizes)
        ]


def run_pingpong(
    cfg: PingPongConfig,
    world: WorldConfig,
    latency: LatencyModel | None = None,
    seed: int = 0,
) -> BandwidthReport:
    if world.team_size != 2:
        raise ConfigError(f"ping-pong needs exactly 2 ranks per team, got {world.team_size}")
    sim = Simulator(world, latency, seed=seed)
    net = HeartbeatNetwork(sim, DetectorParams())
    sizes = cfg.sizes()
    elapsed: dict[int, list[list[float]]] = {t: [[] for _ in sizes] for t in range(world.num_teams)}

    def ping(team):
        me, peer = world.address(team, 0), world.address(team, 1)
        hb = net.monitor(me)
        for si, n in enumerate(sizes):
            for _ in range(cfg.trials):
                hb.heartbeat(0)
                start = sim.now
                for _ in range(cfg.i_max):
                    sim.post_send(me, peer, Channel.INTRA_TEAM, 0, None, n)
                    yield Recv(Channel.INTRA_TEAM, 0, peer)
                elapsed[team][si].append(sim.now - start)

    def pong(team):
        me, peer = world.address(team, 1), world.address(team, 0)
        hb = net.monitor(me)
        for n in sizes:
            for _ in range(cfg.trials):
                hb.heartbeat(0)
                for _ in range(cfg.i_max):
                    yield Recv(Channel.INTRA_TEAM, 0, peer)
                    sim.post_send(me, peer, Channel.INTRA_TEAM, 0, None, n)

    for team in range(world.num_teams):
        sim.spawn(world.address(team, 0), ping(team))
        sim.spawn(world.address(team, 1), pong(team))
    sim.run_until()

    report = BandwidthReport(sizes)
    for team in range(world.num_teams):
        best = [min(e) for e in elapsed[team]]
        report.bandwidth[team] = [2 * cfg.i_max * n / t for n, t in zip(sizes, best)]
        report.rate[team] = [2 * cfg.i_max / t for t in best]
        report.intra_team_messages[team] = sim.sent_by_team.get((team, Channel.INTRA_TEAM), 0)
    report.heartbeat_messages = sim.sent_by_channel[Channel.HEARTBEAT]
    report.task_share_messages = sim.sent_by_channel[Channel.TASK_SHARE]
    report.inter_replica_messages = report.heartbeat_messages + report.task_share_messages
    report.heartbeats_emitted = sum(m.emitted for m in net.monitors.values())
    return report
