"""Task outcome sharing between replicas.

Each rank keeps an outcome database of results received from its replicas.
Before executing a shareable task the rank looks its id up; on a hit the
outcome is copied and the compute is skipped.  On a miss the task runs,
and (unless the outcome arrived meanwhile) is multicast to all replicas.

Incoming shares travel on the task-share channel with ``tag = step``.  A
comm-thread style handler admits them into the database as soon as they
are delivered, drops stale ones, and leaves shares for steps further ahead
than ``lookahead`` in the mailbox until the rank gets there.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Generator, NamedTuple, Sequence, TypeVar

from .heartbeat import fnv1a_64
from .netsim import Channel, Compute, Message, Simulator, Sleep
from .topology import RankAddress, replicas_of

T = TypeVar("T")

DEFAULT_SEND_LIMIT = 16


class Action(IntEnum):
    PREDICT = 0
    RIEMANN = 1
    CORRECT = 2


class TaskId(NamedTuple):
    data_key: int
    action: int
    step: int

    def to_bytes(self) -> bytes:
        return struct.pack("<qqq", self.data_key, self.action, self.step)


ZERO_ID = TaskId(0, 0, 0)


def compute_unique_id(task) -> TaskId:
    """Id of anything carrying ``data_key``, ``action`` and ``step``."""
    return TaskId(int(task.data_key), int(task.action), int(task.step))


def task_outcome(tid: TaskId) -> bytes:
    """Deterministic outcome payload of a task, a pure function of its id."""
    return struct.pack("<Q", fnv1a_64(tid.to_bytes()))


@dataclass(frozen=True)
class ShareableTask:
    id: TaskId
    compute_cost: float
    outcome_size: int = 8

    @property
    def data_key(self) -> int:
        return self.id.data_key

    @property
    def action(self) -> int:
        return self.id.action

    @property
    def step(self) -> int:
        return self.id.step

    def outcome(self) -> bytes:
        return task_outcome(self.id)


class OutcomeDb:
    """Map from task id to ``(payload, arrival_step)``."""

    def __init__(self):
        self._entries: dict[TaskId, tuple[bytes, int]] = {}
        self.high_watermark = 0
        self.bytes_buffered = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, tid: TaskId) -> bool:
        return tid in self._entries

    def insert(self, tid: TaskId, payload: bytes, arrival_step: int) -> bool:
        if tid in self._entries:
            return False
        # receiver-side copy; zero virtual cost, but it occupies memory
        self._entries[tid] = (bytes(payload), arrival_step)
        self.bytes_buffered += len(payload)
        if len(self._entries) > self.high_watermark:
            self.high_watermark = len(self._entries)
        return True

    def pop(self, tid: TaskId) -> bytes | None:
        entry = self._entries.pop(tid, None)
        if entry is None:
            return None
        self.bytes_buffered -= len(entry[0])
        return entry[0]

    def garbage_collect(self, current_step: int) -> int:
        stale = [tid for tid, (_, step) in self._entries.items() if step < current_step]
        for tid in stale:
            self.pop(tid)
        return len(stale)

    def steps(self) -> set[int]:
        return {step for _, step in self._entries.values()}


class SendWindow:
    """Bound on outstanding outcome sends of one rank."""

    def __init__(self, limit: int = DEFAULT_SEND_LIMIT):
        if limit < 1:
            raise ValueError(f"send window limit must be >= 1, got {limit}")
        self.limit = limit
        self.open_sends = 0
        self.high_watermark = 0

    def try_acquire(self, count: int = 1) -> bool:
        if self.open_sends + count > self.limit:
            return False
        self.open_sends += count
        self.high_watermark = max(self.high_watermark, self.open_sends)
        return True

    def release(self, _handle=None) -> None:
        if self.open_sends <= 0:
            raise RuntimeError("send window released more often than acquired")
        self.open_sends -= 1


def shuffle_order(tasks: Sequence[T], team: int, num_teams: int) -> list[T]:
    """Modulo-``num_teams`` permutation of a team's tasks.

    With tasks numbered 1..n, team ``team`` first runs the residue class
    ``(1 + team) mod K``, then ``(2 + team) mod K`` and so on.  Order within
    a class is kept.
    """
    if num_teams <= 1:
        return list(tasks)
    if not 0 <= team < num_teams:
        raise ValueError(f"team {team} outside 0..{num_teams - 1}")
    out: list[T] = []
    for j in range(1, num_teams + 1):
        residue = (j + team) % num_teams
        out.extend(t for i, t in enumerate(tasks, start=1) if i % num_teams == residue)
    return out


class TaskResult(str, Enum):
    REUSED = "reused"
    COMPUTED = "computed"


class Receipt(str, Enum):
    INSERTED = "inserted"
    DUPLICATE = "duplicate"
    STALE = "stale"


@dataclass
class StepCounters:
    computed: int = 0
    reused: int = 0
    suppressed_shares: int = 0
    recheck_hits: int = 0
    db_high_watermark: int = 0


@dataclass(frozen=True)
class StepRow:
    step: int
    team: int
    computed_count: int
    reused_count: int
    suppressed_shares: int
    db_high_watermark: int

    CSV_HEADER = ("step", "team", "computed_count", "reused_count", "suppressed_shares", "db_high_watermark")

    def as_csv(self) -> tuple:
        return (self.step, self.team, self.computed_count, self.reused_count,
                self.suppressed_shares, self.db_high_watermark)


class TaskSharingRuntime:
    """Per-rank outcome database, send window and scheduler wrapper."""

    def __init__(
        self,
        sim: Simulator,
        addr: RankAddress,
        enabled: bool = True,
        send_limit: int = DEFAULT_SEND_LIMIT,
        lookahead: int = 1,
    ):
        self.sim = sim
        self.addr = addr
        self.enabled = enabled and sim.world.num_teams > 1
        self.replicas = replicas_of(addr, sim.world)
        self.db = OutcomeDb()
        self.window = SendWindow(send_limit)
        self.lookahead = lookahead
        self.current_step = 0
        self.steps: dict[int, StepCounters] = {}
        self.stale_dropped = 0
        self.duplicates_dropped = 0
        self.shared_bytes = 0
        self.pending_high_watermark = 0
        if self.enabled:
            sim.context(addr).handlers[Channel.TASK_SHARE] = self._on_delivery

    def _counters(self) -> StepCounters:
        c = self.steps.get(self.current_step)
        if c is None:
            c = self.steps[self.current_step] = StepCounters()
        return c

    # -- receive side ---------------------------------------------------------

    def handle_task_receive(self, tid: TaskId, payload: bytes) -> Receipt:
        if tid.step < self.current_step:
            self.stale_dropped += 1
            return Receipt.STALE
        if not self.db.insert(tid, payload, tid.step):
            self.duplicates_dropped += 1
            return Receipt.DUPLICATE
        c = self._counters()
        c.db_high_watermark = max(c.db_high_watermark, len(self.db))
        return Receipt.INSERTED

    def _on_delivery(self, msg: Message) -> None:
        if msg.tag > self.current_step + self.lookahead:
            pending = self.sim.pending_messages(self.addr, Channel.TASK_SHARE)
            self.pending_high_watermark = max(self.pending_high_watermark, pending)
            return
        got = self.sim.poll_receive(self.addr, Channel.TASK_SHARE, msg.tag)
        if got is not None:
            self.handle_task_receive(*got.payload)

    def garbage_collect(self, current_step: int) -> int:
        return self.db.garbage_collect(current_step)

    def begin_step(self, step: int) -> int:
        """Advance to ``step``: collect old entries, then admit held shares."""
        if step < self.current_step:
            raise ValueError(f"step went backwards: {step} < {self.current_step}")
        self.current_step = step
        self._counters()
        removed = self.garbage_collect(step)
        if self.enabled:
            boxes = self.sim.context(self.addr).mailbox[Channel.TASK_SHARE]
            for tag in sorted(t for t, q in boxes.items() if q and t <= step + self.lookahead):
                while (got := self.sim.poll_receive(self.addr, Channel.TASK_SHARE, tag)) is not None:
                    self.handle_task_receive(*got.payload)
        return removed

    # -- execute side ---------------------------------------------------------

    def run_task_if_not_received(self, task: ShareableTask) -> Generator[Compute, None, tuple[TaskResult, bytes]]:
        """Rank-program fragment; use as ``result, payload = yield from ...``."""
        tid = task.id
        c = self._counters()
        payload = self.db.pop(tid) if self.enabled else None
        if payload is not None:
            c.reused += 1
            return TaskResult.REUSED, payload
        yield Compute(task.compute_cost)
        payload = task.outcome()
        c = self._counters()
        c.computed += 1
        if not self.enabled:
            return TaskResult.COMPUTED, payload
        if self.db.pop(tid) is not None:
            # the replica beat us to it while we were computing
            c.recheck_hits += 1
        elif self.window.try_acquire(len(self.replicas)):
            for replica in self.replicas:
                h = self.sim.post_send(self.addr, replica, Channel.TASK_SHARE, tid.step,
                                       (tid, payload), task.outcome_size)
                h.on_complete(self.window.release)
                self.shared_bytes += task.outcome_size
        else:
            c.suppressed_shares += 1
        # dispatch the next task only after every completion of this instant
        # has been published
        yield Sleep(0.0)
        return TaskResult.COMPUTED, payload

    def rows(self) -> list[StepRow]:
        return [
            StepRow(step, self.addr.team, c.computed, c.reused, c.suppressed_shares, c.db_high_watermark)
            for step, c in sorted(self.steps.items())
        ]
