"""Synthetic timestep solver with shareable prediction tasks.

Per step every rank runs ``n`` prediction tasks (shareable, one per cell it
owns), a non-shareable remainder (Riemann solve plus correction, lumped into
one cost), then swaps zero-size halo messages with its ring neighbours.
The neighbour exchange is what couples the ranks of a team.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

from ..errors import ConfigError
from ..heartbeat import (
    ConsistencyVerdict,
    DetectorParams,
    HeartbeatNetwork,
    fnv1a_64,
)
from ..netsim import Channel, Compute, EventTrace, FaultEvent, LatencyModel, Recv, Simulator, Sleep
from ..tasksharing import (
    Action,
    ShareableTask,
    StepRow,
    TaskId,
    TaskResult,
    TaskSharingRuntime,
    shuffle_order,
)
from ..topology import RankAddress, WorldConfig

TASK_SECTION = 1
CONSISTENCY_TAG = 3


@dataclass(frozen=True)
class BitFlip:
    """Flip one bit of ``team``'s consistency buffer at ``step``."""

    team: int
    step: int
    bit: int = 0


@dataclass(frozen=True)
class SolverConfig:
    ranks_per_team: int = 8
    steps: int = 100
    tasks_per_rank: int = 64
    shareable_cost: float = 0.9 / 64
    nonshareable_cost: float = 0.1
    outcome_size: int = 8
    imbalance: dict = field(default_factory=dict)  # team_rank -> cost multiplier
    step_jitter: float = 0.005
    dt_hb: float = 1.0
    hb_jitter: float = 0.05  # fraction of dt_hb
    heartbeats: bool = True
    send_limit: int = 16
    lookahead: int = 1
    consistency_every: int = 0
    bitflip: BitFlip | None = None
    spawn_shuffle: bool = False
    cores_per_rank: int = 8

    def __post_init__(self):
        if self.ranks_per_team < 1 or self.steps < 1 or self.tasks_per_rank < 0:
            raise ConfigError(f"invalid solver size in {self}")
        if self.shareable_cost < 0 or self.nonshareable_cost < 0 or self.step_jitter < 0:
            raise ConfigError("costs and jitter must be >= 0")
        if self.cores_per_rank < 2:
            raise ConfigError("cores_per_rank must be >= 2 to spare a progression core")
        for k, v in self.imbalance.items():
            if not 0 <= int(k) < self.ranks_per_team or v <= 0:
                raise ConfigError(f"bad imbalance entry {k}: {v}")

    @property
    def shareable_fraction(self) -> float:
        share = self.tasks_per_rank * self.shareable_cost
        total = share + self.nonshareable_cost
        return share / total if total else 0.0

    @property
    def step_time(self) -> float:
        return self.tasks_per_rank * self.shareable_cost + self.nonshareable_cost

    @classmethod
    def with_fraction(cls, f: float, step_time: float = 1.0, **kw) -> "SolverConfig":
        n = kw.pop("tasks_per_rank", 64)
        return cls(tasks_per_rank=n, shareable_cost=f * step_time / n,
                   nonshareable_cost=(1 - f) * step_time, **kw)

    def fingerprint(self) -> str:
        """Identity of the computation, independent of teams/sharing/faults."""
        keys = ("ranks_per_team", "steps", "tasks_per_rank", "shareable_cost",
                "nonshareable_cost", "outcome_size")
        d = {k: getattr(self, k) for k in keys}
        d["imbalance"] = {str(k): v for k, v in sorted(self.imbalance.items())}
        return json.dumps(d, sort_keys=True)

    def to_json(self) -> dict:
        d = asdict(self)
        d["imbalance"] = {str(k): v for k, v in sorted(self.imbalance.items())}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        d["imbalance"] = {int(k): v for k, v in d.get("imbalance", {}).items()}
        if d.get("bitflip") is not None:
            d["bitflip"] = BitFlip(**d["bitflip"])
        return cls(**d)


@dataclass
class SolverReport:
    config: SolverConfig
    sharing: bool
    num_teams: int
    step_starts: dict[int, list[float]]
    step_rows: list[StepRow]
    compute_cost: dict[int, float]
    finish_time: dict[int, float]
    reused: dict[int, int]
    computed: dict[int, int]
    shared_bytes: dict[int, int]
    final_state: dict[int, dict[int, int]]
    db_high_watermark: int
    send_high_watermark: int
    pending_high_watermark: int
    send_limit: int
    suppressed_shares: int
    recheck_hits: int
    verdicts: list[tuple[RankAddress, ConsistencyVerdict]]
    network: HeartbeatNetwork | None
    messages: dict[str, int]
    trace: EventTrace | None = None

    @property
    def time_to_solution(self) -> float:
        return max(self.finish_time.values())

    def divergence(self, a: int = 0, b: int = 1) -> list[float]:
        return [abs(x - y) for x, y in zip(self.step_starts[a], self.step_starts[b])]

    def reuse_per_step(self, team: int) -> list[int]:
        return [r.reused_count for r in self.step_rows if r.team == team]

    def reuse_fraction(self, team: int | None = None) -> float:
        teams = [team] if team is not None else list(self.reused)
        reused = sum(self.reused[t] for t in teams)
        total = reused + sum(self.computed[t] for t in teams)
        return reused / total if total else 0.0

    def state_digest(self, team: int = 0) -> int:
        data = b"".join(struct.pack("<qQ", k, v) for k, v in sorted(self.final_state[team].items()))
        return fnv1a_64(data)


def _fold(state: int, payload: bytes) -> int:
    return fnv1a_64(struct.pack("<Q", state) + payload)


def run_solver(
    cfg: SolverConfig,
    world: WorldConfig,
    plan: Sequence[FaultEvent] = (),
    sharing: bool = True,
    latency: LatencyModel | dict | None = None,
    params: DetectorParams | None = None,
    seed: int = 0,
    fair_baseline: bool = False,
    trace: bool = False,
) -> SolverReport:
    if world.team_size != cfg.ranks_per_team:
        raise ConfigError(f"world has {world.team_size} ranks per team, config says {cfg.ranks_per_team}")
    sim = Simulator(world, latency, seed=seed, trace=trace)
    params = params or DetectorParams(dt_hb=cfg.dt_hb)
    net = HeartbeatNetwork(sim, params) if cfg.heartbeats else None
    n = cfg.tasks_per_rank
    R = world.team_size
    K = world.num_teams
    # sharing needs a progression core; in a fair comparison it is taken
    # away from compute
    slowdown = cfg.cores_per_rank / (cfg.cores_per_rank - 1) if (sharing and fair_baseline) else 1.0

    starts = [[0.0] * cfg.steps for _ in range(world.world_size)]
    runtimes: dict[int, TaskSharingRuntime] = {}
    states: dict[int, dict[int, int]] = {}
    finish: dict[int, float] = {}
    verdicts: list[tuple[RankAddress, ConsistencyVerdict]] = []

    def program(me: RankAddress):
        rt = runtimes[me.world_rank]
        hb = net.monitor(me) if net is not None else None
        mult = cfg.imbalance.get(me.team_rank, 1.0) * slowdown
        task_cost = cfg.shareable_cost * mult
        rest_cost = cfg.nonshareable_cost * mult
        jitter_rng = sim.rng("step_jitter", me.world_rank)
        spawn_rng = sim.rng("spawn", me.world_rank)
        left = world.address(me.team, (me.team_rank - 1) % R)
        right = world.address(me.team, (me.team_rank + 1) % R)
        cells = {me.team_rank * n + j: 0 for j in range(n)}
        states[me.world_rank] = cells
        if hb is not None:
            hb.start_periodic(cfg.dt_hb, cfg.hb_jitter * cfg.dt_hb)
        for step in range(cfg.steps):
            if cfg.step_jitter:
                yield Sleep(jitter_rng.uniform(0.0, cfg.step_jitter))
            starts[me.world_rank][step] = sim.now
            rt.begin_step(step)
            if hb is not None:
                hb.heartbeat(+TASK_SECTION)
            tasks = [ShareableTask(TaskId(key, Action.PREDICT, step), task_cost, cfg.outcome_size) for key in cells]
            if cfg.spawn_shuffle:
                spawn_rng.shuffle(tasks)
            if rt.enabled:
                tasks = shuffle_order(tasks, me.team, K)
            for task in tasks:
                _, payload = yield from rt.run_task_if_not_received(task)
                cells[task.data_key] = _fold(cells[task.data_key], payload)
            if hb is not None:
                hb.heartbeat(-TASK_SECTION)
            if rest_cost:
                yield Compute(rest_cost)
            if R > 1:
                sim.post_send(me, left, Channel.INTRA_TEAM, step)
                sim.post_send(me, right, Channel.INTRA_TEAM, step)
                yield Recv(Channel.INTRA_TEAM, step, left)
                yield Recv(Channel.INTRA_TEAM, step, right)
            if hb is not None and cfg.consistency_every and step % cfg.consistency_every == 0:
                buf = bytearray(b"".join(struct.pack("<qQ", k, v) for k, v in sorted(cells.items())))
                flip = cfg.bitflip
                if flip is not None and flip.team == me.team and flip.step == step:
                    bit = flip.bit % (8 * len(buf))
                    buf[bit // 8] ^= 1 << (bit % 8)
                hb.compare_consistency(bytes(buf), CONSISTENCY_TAG)
        finish[me.world_rank] = sim.now
        if hb is not None:
            hb.stop()

    for addr in world.addresses():
        runtimes[addr.world_rank] = TaskSharingRuntime(
            sim, addr, enabled=sharing, send_limit=cfg.send_limit, lookahead=cfg.lookahead
        )
        sim.spawn(addr, program(addr))
    for fault in plan:
        sim.inject_fault(fault)
    sim.run_until()
    if net is not None:
        net.drain()

    unfinished = [a for a in world.addresses() if a.world_rank not in finish and sim.ranks[a.world_rank].alive]
    if unfinished:
        raise RuntimeError(f"solver deadlocked; unfinished ranks {[str(a) for a in unfinished]}")

    teams = range(K)
    step_starts = {
        t: [max(starts[a.world_rank][s] for a in world.addresses() if a.team == t) for s in range(cfg.steps)]
        for t in teams
    }
    rows = []
    for t in teams:
        members = [runtimes[a.world_rank] for a in world.addresses() if a.team == t]
        for s in range(cfg.steps):
            cs = [rt.steps.get(s) for rt in members]
            cs = [c for c in cs if c is not None]
            rows.append(StepRow(
                s, t,
                sum(c.computed for c in cs),
                sum(c.reused for c in cs),
                sum(c.suppressed_shares for c in cs),
                max((c.db_high_watermark for c in cs), default=0),
            ))
    by_team = lambda f: {t: f([a for a in world.addresses() if a.team == t]) for t in teams}
    if net is not None:
        for m in net.monitors.values():
            verdicts.extend((m.addr, v) for v in m.verdicts)
    rts = list(runtimes.values())
    return SolverReport(
        config=cfg,
        sharing=sharing,
        num_teams=K,
        step_starts=step_starts,
        step_rows=rows,
        compute_cost=by_team(lambda ms: math.fsum(sim.ranks[a.world_rank].compute_time for a in ms)),
        finish_time=by_team(lambda ms: max(finish.get(a.world_rank, 0.0) for a in ms)),
        reused=by_team(lambda ms: sum(c.reused for a in ms for c in runtimes[a.world_rank].steps.values())),
        computed=by_team(lambda ms: sum(c.computed for a in ms for c in runtimes[a.world_rank].steps.values())),
        shared_bytes=by_team(lambda ms: sum(runtimes[a.world_rank].shared_bytes for a in ms)),
        final_state=by_team(lambda ms: {k: v for a in ms for k, v in states.get(a.world_rank, {}).items()}),
        db_high_watermark=max(rt.db.high_watermark for rt in rts),
        send_high_watermark=max(rt.window.high_watermark for rt in rts),
        pending_high_watermark=max(rt.pending_high_watermark for rt in rts),
        send_limit=cfg.send_limit,
        suppressed_shares=sum(c.suppressed_shares for rt in rts for c in rt.steps.values()),
        recheck_hits=sum(c.recheck_hits for rt in rts for c in rt.steps.values()),
        verdicts=verdicts,
        network=net,
        messages={c.value: sim.sent_by_channel[c] for c in Channel},
        trace=sim.trace,
    )
