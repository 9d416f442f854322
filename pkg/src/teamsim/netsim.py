"""Deterministic discrete-event core.

A :class:`Simulator` owns a virtual clock, one execution context per world
rank, FIFO message channels with an alpha/beta latency model, and the
pause/kill fault primitives.  Rank programs are plain generators that yield
:class:`Compute`, :class:`Sleep` or :class:`Recv` commands; everything else
(sends, polls, heartbeats) is a direct call.

Events are ordered by ``(time, priority, seq)`` where ``seq`` is the
creation counter, so identical inputs always replay identically.  Message
deliveries carry priority 0 and everything else priority 1: whatever is
delivered at time ``t`` is visible to every rank acting at ``t``.  Events can be *owned* by a
rank.  Owned events of a paused rank fire late, and a killed rank's owned
events never fire.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, NamedTuple

from .errors import DomainError, SimulationError
from .topology import RankAddress, WorldConfig, map_world_rank


class Channel(str, Enum):
    INTRA_TEAM = "intra_team"
    HEARTBEAT = "heartbeat"
    TASK_SHARE = "task_share"

    @property
    def inter_replica(self) -> bool:
        return self is not Channel.INTRA_TEAM


@dataclass(frozen=True)
class LatencyModel:
    """``latency(size) = alpha + size / beta``, plus optional seeded jitter."""

    alpha: float = 1e-6
    beta: float = 1e9
    jitter: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0 or self.jitter < 0:
            raise DomainError(f"invalid latency model {self}")

    def latency(self, size_bytes: int) -> float:
        return self.alpha + size_bytes / self.beta


@dataclass(slots=True, eq=False)
class Message:
    src: RankAddress
    dst: RankAddress
    channel: Channel
    tag: int
    payload: object
    size_bytes: int
    send_time: float
    deliver_time: float = math.nan
    seq: int = 0


class SendState(str, Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    UNDELIVERABLE = "undeliverable"
    DEAD_SENDER = "dead_sender"


class SendHandle:
    """Completion handle of a nonblocking send."""

    __slots__ = ("message", "state", "_callbacks")

    def __init__(self, message: Message | None, state: SendState = SendState.PENDING):
        self.message = message
        self.state = state
        self._callbacks: list[Callable[[SendHandle], None]] = []

    @property
    def complete(self) -> bool:
        return self.state is not SendState.PENDING

    @property
    def delivered(self) -> bool:
        return self.state is SendState.DELIVERED

    def on_complete(self, callback: Callable[["SendHandle"], None]) -> None:
        if self.complete:
            callback(self)
        else:
            self._callbacks.append(callback)

    def _finish(self, state: SendState) -> None:
        self.state = state
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)


class FaultKind(str, Enum):
    PAUSE = "pause"
    KILL = "kill"


@dataclass(frozen=True)
class FaultEvent:
    kind: FaultKind
    target: RankAddress
    at: float
    duration: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if self.at < 0:
            raise DomainError(f"fault time must be >= 0, got {self.at}")
        if self.kind is FaultKind.PAUSE and not self.duration > 0:
            raise DomainError(f"pause duration must be > 0, got {self.duration}")

    @classmethod
    def pause(cls, target: RankAddress, at: float, duration: float) -> "FaultEvent":
        return cls(FaultKind.PAUSE, target, at, duration)

    @classmethod
    def kill(cls, target: RankAddress, at: float) -> "FaultEvent":
        return cls(FaultKind.KILL, target, at)

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "world_rank": self.target.world_rank,
            "team": self.target.team,
            "team_rank": self.target.team_rank,
            "at": self.at,
            "duration": self.duration,
        }


class TraceEvent(NamedTuple):
    time: float
    rank: int  # world rank, -1 for unowned events
    kind: str


class EventTrace(list):
    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"time": e.time, "rank": e.rank, "kind": e.kind}) + "\n" for e in self
        )


# -- process commands ---------------------------------------------------------


class Compute(NamedTuple):
    """Occupy the rank for ``cost`` virtual seconds, charged as compute time."""

    cost: float


class Sleep(NamedTuple):
    """Idle for ``duration`` virtual seconds without charging compute."""

    duration: float


class Recv(NamedTuple):
    """Block until a matching message is consumable; resumes with the message."""

    channel: Channel
    tag: int | None = None
    src: RankAddress | None = None


class RankContext:
    """Execution state of one simulated process."""

    def __init__(self, addr: RankAddress):
        self.addr = addr
        self.alive = True
        self.finished = False
        self.paused_until = 0.0
        self.killed_at = math.inf
        self.compute_time = 0.0
        self.mailbox: dict[Channel, dict[int, deque[Message]]] = {c: {} for c in Channel}
        # comm-thread style handlers, called on every delivery for a channel
        self.handlers: dict[Channel, Callable[[Message], None]] = {}
        self.waiters: list[tuple[Recv, "_Process"]] = []
        self.pending_events: dict[int, list] = {}
        self.exit_hooks: list[Callable[[], None]] = []


class _Process:
    __slots__ = ("sim", "ctx", "gen")

    def __init__(self, sim: "Simulator", ctx: RankContext, gen: Iterator):
        self.sim = sim
        self.ctx = ctx
        self.gen = gen

    def resume(self, value=None) -> None:
        sim, ctx = self.sim, self.ctx
        while True:
            try:
                cmd = self.gen.send(value)
            except StopIteration:
                ctx.finished = True
                for hook in ctx.exit_hooks:
                    hook()
                return
            value = None
            kind = type(cmd)
            if kind is Compute:
                ctx.compute_time += cmd.cost
                sim.schedule(sim.now + cmd.cost, self.resume, ctx.addr.world_rank, "compute")
                return
            if kind is Sleep:
                sim.schedule(sim.now + cmd.duration, self.resume, ctx.addr.world_rank, "sleep")
                return
            if kind is Recv:
                msg = sim.poll_receive(ctx.addr, cmd.channel, cmd.tag, src=cmd.src)
                if msg is not None:
                    value = msg
                    continue
                ctx.waiters.append((cmd, self))
                return
            raise SimulationError(f"{ctx.addr}: unknown process command {cmd!r}")


_ACTIVE = 5
_PRIO = 6
DELIVERY_PRIORITY = 0
DEFAULT_PRIORITY = 1


class Simulator:
    """Single-threaded event loop for one simulation instance."""

    def __init__(
        self,
        world: WorldConfig,
        latency: LatencyModel | dict[Channel, LatencyModel] | None = None,
        seed: int = 0,
        trace: bool = False,
        record_messages: bool = False,
    ):
        self.world = world
        if latency is None:
            latency = LatencyModel()
        if isinstance(latency, LatencyModel):
            latency = {c: latency for c in Channel}
        self.latency = {c: latency.get(c, LatencyModel()) for c in Channel}
        self.seed = seed
        self.now = 0.0
        self.ranks = [RankContext(a) for a in world.addresses()]
        self.trace: EventTrace | None = EventTrace() if trace else None
        self.message_log: list[Message] | None = [] if record_messages else None
        self.stats = {
            "sent": 0,
            "delivered": 0,
            "dropped": 0,
            "consumed": 0,
            "dead_sender": 0,
        }
        self.sent_by_channel = {c: 0 for c in Channel}
        self.sent_by_team: dict[tuple[int, Channel], int] = {}
        self._heap: list = []
        self._seq = 0
        self._fifo_clock: dict[tuple, float] = {}
        self._rngs: dict[tuple, random.Random] = {}
        self._killed: set[int] = set()

    # -- plumbing -------------------------------------------------------------

    def rng(self, stream: str, world_rank: int = -1) -> random.Random:
        """Independent seeded stream; consuming one never perturbs another."""
        key = (stream, world_rank)
        r = self._rngs.get(key)
        if r is None:
            r = self._rngs[key] = random.Random(f"{self.seed}/{stream}/{world_rank}")
        return r

    def context(self, addr: RankAddress) -> RankContext:
        ctx = self.ranks[addr.world_rank] if 0 <= addr.world_rank < len(self.ranks) else None
        if ctx is None or ctx.addr != addr:
            raise DomainError(f"unknown rank {addr!r}")
        return ctx

    def schedule(
        self,
        time: float,
        callback: Callable[[], None],
        owner: int | None = None,
        kind: str = "event",
        priority: int = DEFAULT_PRIORITY,
    ) -> list:
        if time < self.now:
            raise SimulationError(f"event {kind!r} scheduled at {time} before now={self.now}")
        self._seq += 1
        entry = [time, self._seq, callback, owner, kind, True, priority]
        heapq.heappush(self._heap, (time, priority, self._seq, entry))
        if owner is not None:
            self.ranks[owner].pending_events[self._seq] = entry
        return entry

    def _repush(self, entry: list, time: float) -> None:
        entry[0] = time
        heapq.heappush(self._heap, (time, entry[_PRIO], entry[1], entry))
        if entry[3] is not None:
            self.ranks[entry[3]].pending_events[entry[1]] = entry

    def spawn(self, addr: RankAddress, program: Iterator, at: float | None = None) -> None:
        proc = _Process(self, self.context(addr), program)
        self.schedule(self.now if at is None else at, proc.resume, addr.world_rank, "start")

    # -- messaging ------------------------------------------------------------

    def post_send(
        self,
        src: RankAddress,
        dst: RankAddress,
        channel: Channel,
        tag: int,
        payload: object = b"",
        size_bytes: int = 0,
    ) -> SendHandle:
        """Nonblocking send; the handle completes at delivery."""
        channel = Channel(channel)
        sctx, dctx = self.context(src), self.context(dst)
        if channel is Channel.INTRA_TEAM:
            if src.team != dst.team:
                raise DomainError(f"intra-team message crosses teams: {src} -> {dst}")
        elif src.team == dst.team or src.team_rank != dst.team_rank:
            raise DomainError(f"inter-replica message between non-replicas: {src} -> {dst}")
        if size_bytes < 0:
            raise DomainError("size_bytes must be >= 0")
        if not sctx.alive:
            self.stats["dead_sender"] += 1
            return SendHandle(None, SendState.DEAD_SENDER)
        model = self.latency[channel]
        deliver = self.now + model.latency(size_bytes)
        if model.jitter:
            deliver += self.rng("latency", src.world_rank).uniform(0.0, model.jitter)
        # non-overtaking per (src, dst, channel, tag)
        key = (src.world_rank, dst.world_rank, channel, tag)
        deliver = max(deliver, self._fifo_clock.get(key, 0.0))
        self._fifo_clock[key] = deliver
        msg = Message(src, dst, channel, tag, payload, size_bytes, self.now, deliver)
        handle = SendHandle(msg)
        self.stats["sent"] += 1
        self.sent_by_channel[channel] += 1
        tkey = (src.team, channel)
        self.sent_by_team[tkey] = self.sent_by_team.get(tkey, 0) + 1
        if self.message_log is not None:
            self.message_log.append(msg)
        self.schedule(deliver, lambda: self._deliver(handle, dctx), None, "deliver", DELIVERY_PRIORITY)
        return handle

    def _deliver(self, handle: SendHandle, dctx: RankContext) -> None:
        msg = handle.message
        if not dctx.alive:
            self.stats["dropped"] += 1
            handle._finish(SendState.UNDELIVERABLE)
            return
        msg.seq = self.stats["delivered"]
        self.stats["delivered"] += 1
        dctx.mailbox[msg.channel].setdefault(msg.tag, deque()).append(msg)
        handle._finish(SendState.DELIVERED)
        if dctx.paused_until > self.now:
            self.schedule(self.now, lambda: self._notify(dctx, msg), dctx.addr.world_rank, "notify")
        else:
            self._notify(dctx, msg)

    def _notify(self, ctx: RankContext, msg: Message) -> None:
        handler = ctx.handlers.get(msg.channel)
        if handler is not None:
            handler(msg)
        if not ctx.waiters:
            return
        for i, (cmd, proc) in enumerate(ctx.waiters):
            if cmd.channel is not msg.channel:
                continue
            if cmd.tag is not None and cmd.tag != msg.tag:
                continue
            if cmd.src is not None and cmd.src != msg.src:
                continue
            got = self.poll_receive(ctx.addr, cmd.channel, cmd.tag, src=cmd.src)
            if got is None:
                continue
            del ctx.waiters[i]
            proc.resume(got)
            return

    def poll_receive(
        self,
        rank: RankAddress,
        channel: Channel,
        tag_filter: int | None = None,
        src: RankAddress | None = None,
    ) -> Message | None:
        """Consume the oldest delivered message matching channel/tag/src, if any."""
        boxes = self.context(rank).mailbox[Channel(channel)]
        if tag_filter is not None:
            queue = boxes.get(tag_filter)
            candidates = [queue] if queue else []
        else:
            candidates = [q for q in boxes.values() if q]
        best = None
        best_q = None
        for q in candidates:
            for m in q:
                if src is None or m.src == src:
                    if best is None or m.seq < best.seq:
                        best, best_q = m, q
                    break
        if best is None:
            return None
        best_q.remove(best)
        self.stats["consumed"] += 1
        return best

    def pending_messages(self, rank: RankAddress, channel: Channel | None = None) -> int:
        ctx = self.context(rank)
        chans = [channel] if channel is not None else list(Channel)
        return sum(len(q) for c in chans for q in ctx.mailbox[c].values())

    def conservation(self) -> dict[str, int]:
        """Reconcile sent messages against their fates."""
        in_flight = self.stats["sent"] - self.stats["delivered"] - self.stats["dropped"]
        waiting = sum(self.pending_messages(c.addr) for c in self.ranks)
        return {
            "sent": self.stats["sent"],
            "consumed": self.stats["consumed"],
            "dropped": self.stats["dropped"],
            "pending": waiting,
            "in_flight": in_flight,
        }

    # -- faults ---------------------------------------------------------------

    def inject_fault(self, fault: FaultEvent) -> None:
        ctx = self.context(fault.target)
        if fault.at < self.now:
            raise DomainError(f"fault at {fault.at} lies before now={self.now}")
        if fault.kind is FaultKind.KILL:
            if fault.target.world_rank in self._killed:
                raise DomainError(f"{fault.target} already has a kill scheduled")
            self._killed.add(fault.target.world_rank)
            self.schedule(fault.at, lambda: self._kill(ctx), None, "kill")
        else:
            self.schedule(fault.at, lambda: self._pause(ctx, fault.duration), None, "pause")

    def _pause(self, ctx: RankContext, duration: float) -> None:
        if not ctx.alive:
            return
        now = self.now
        ctx.paused_until = max(ctx.paused_until, now) + duration
        for seq, entry in list(ctx.pending_events.items()):
            if entry[_ACTIVE] and entry[0] >= now:
                entry[_ACTIVE] = False
                shifted = list(entry)
                shifted[_ACTIVE] = True
                self._repush(shifted, entry[0] + duration)

    def _kill(self, ctx: RankContext) -> None:
        ctx.alive = False
        ctx.killed_at = self.now
        for entry in ctx.pending_events.values():
            entry[_ACTIVE] = False
        ctx.pending_events.clear()
        ctx.waiters.clear()

    # -- loop -----------------------------------------------------------------

    def run_until(self, clock_limit: float = math.inf) -> EventTrace:
        heap = self._heap
        ranks = self.ranks
        trace = self.trace
        pop = heapq.heappop
        while heap and heap[0][0] <= clock_limit:
            time, _, seq, entry = pop(heap)
            if not entry[_ACTIVE]:
                continue
            owner = entry[3]
            if owner is not None:
                ctx = ranks[owner]
                if ctx.pending_events.get(seq) is entry:
                    del ctx.pending_events[seq]
                if not ctx.alive:
                    continue
                if ctx.paused_until > time:
                    self._repush(entry, ctx.paused_until)
                    continue
            if time < self.now:
                raise SimulationError(f"clock would move backwards: {time} < {self.now}")
            self.now = time
            if trace is not None:
                trace.append(TraceEvent(time, -1 if owner is None else owner, entry[4]))
            entry[_ACTIVE] = False
            entry[2]()
        if clock_limit != math.inf and clock_limit > self.now:
            self.now = clock_limit
        return trace if trace is not None else EventTrace()

    @property
    def idle(self) -> bool:
        return not any(e[3][_ACTIVE] for e in self._heap)
