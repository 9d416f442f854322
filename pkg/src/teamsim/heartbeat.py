"""Heartbeats: emission, interval bookkeeping, health classification and
hash-based consistency voting.

Tag protocol of :meth:`HeartbeatMonitor.heartbeat`:

* ``tag > 0`` opens the measured section ``tag``,
* ``tag < 0`` closes section ``-tag`` and yields one in-between time,
* ``tag == 0`` is single-heartbeat mode: each call closes the previous
  interval and opens the next one.

Replicas never compare absolute clocks, only the in-between times carried
by (or reconstructed from) the heartbeat records.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .netsim import Channel, Simulator
from .topology import RankAddress, replicas_of

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

HEARTBEAT_BYTES = 16  # timestamp + seq
HASH_BYTES = 8


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def canonical_bytes(values: bytes | Iterable[float | int]) -> bytes:
    """Little-endian serialisation: ints as int64, floats as float64."""
    if isinstance(values, (bytes, bytearray, memoryview)):
        return bytes(values)
    out = bytearray()
    for v in values:
        if isinstance(v, int):
            out += struct.pack("<q", v)
        else:
            out += struct.pack("<d", v)
    return bytes(out)


@dataclass(frozen=True)
class HeartbeatRecord:
    tag: int
    emit_time: float
    sender: RankAddress
    seq: int
    consistency_hash: int | None = None
    hash_index: int = -1
    final: bool = False

    @property
    def size_bytes(self) -> int:
        return HEARTBEAT_BYTES + (HASH_BYTES if self.consistency_hash is not None else 0)


class IntervalSeries:
    """In-between times of one section, exponentially smoothed."""

    def __init__(self, alpha: float = 0.3):
        self.alpha = alpha
        self.intervals: list[float] = []
        self.smoothed: float | None = None
        self.last_heard = 0.0
        self.final = False

    def add(self, dt: float) -> float:
        self.intervals.append(dt)
        if self.smoothed is None:
            self.smoothed = dt
        else:
            self.smoothed = self.alpha * dt + (1.0 - self.alpha) * self.smoothed
        return self.smoothed

    def __len__(self):
        return len(self.intervals)

    def __repr__(self):
        return f"IntervalSeries(n={len(self.intervals)}, smoothed={self.smoothed})"


_EMPTY = IntervalSeries()


class Health(str, Enum):
    HEALTHY = "healthy"
    SLOW = "slow"
    FAILED = "failed"


_SEVERITY = {Health.HEALTHY: 0, Health.SLOW: 1, Health.FAILED: 2}


def worst(statuses: Iterable[Health]) -> Health:
    return max(statuses, key=_SEVERITY.__getitem__, default=Health.HEALTHY)


@dataclass
class RankHealth:
    status: Health = Health.HEALTHY
    last_heard: float = 0.0


@dataclass(frozen=True)
class DetectorParams:
    alpha: float = 0.3
    tol: float = 1.5
    timeout_mult: float = 3.0
    dt_hb: float = 1.0


def is_slow(local: IntervalSeries, replica: IntervalSeries, tol: float) -> bool:
    return (
        local.smoothed is not None
        and replica.smoothed is not None
        and replica.smoothed > tol * local.smoothed
    )


def classify(local: IntervalSeries, replica: IntervalSeries, now: float, params: DetectorParams) -> RankHealth:
    """Health of ``replica`` as judged from ``local``'s point of view.

    Failed when the replica has been silent for ``timeout_mult * dt_hb``
    (unless it announced its regular termination); Slow when its smoothed
    in-between time exceeds ``tol`` times the local one.
    """
    if not replica.final and now - replica.last_heard >= params.timeout_mult * params.dt_hb:
        return RankHealth(Health.FAILED, replica.last_heard)
    if is_slow(local, replica, params.tol):
        return RankHealth(Health.SLOW, replica.last_heard)
    return RankHealth(Health.HEALTHY, replica.last_heard)


def divergence(t_a: float, t_b: float) -> float:
    """Gap between two teams' start times of the same timestep."""
    return abs(t_a - t_b)


class VerdictKind(str, Enum):
    PENDING = "pending"
    CONSISTENT = "consistent"
    DETECTED = "detected"
    FAULTY = "faulty"


@dataclass(frozen=True)
class ConsistencyVerdict:
    kind: VerdictKind
    section: int = 0
    index: int = -1
    faulty_teams: tuple[int, ...] = ()
    reason: str = ""


def vote(hashes: dict[int, int], num_teams: int) -> tuple[VerdictKind, tuple[int, ...], str]:
    """Majority vote over one hash per team.

    Returns ``(kind, faulty_teams, reason)``.
    """
    values = Counter(hashes.values())
    if len(values) == 1:
        return VerdictKind.CONSISTENT, (), ""
    if num_teams == 2:
        return VerdictKind.DETECTED, (), "unknown_team"
    value, count = values.most_common(1)[0]
    if count * 2 <= num_teams:
        return VerdictKind.DETECTED, (), "unresolvable"
    faulty = tuple(sorted(t for t, h in hashes.items() if h != value))
    return VerdictKind.FAULTY, faulty, ""


@dataclass(frozen=True)
class IntervalRow:
    time: float
    team: int
    team_rank: int
    tag: int
    interval: float
    smoothed: float
    status: str

    CSV_HEADER = ("time", "team", "team_rank", "tag", "interval", "smoothed", "status")

    def as_csv(self) -> tuple:
        return (self.time, self.team, self.team_rank, self.tag, self.interval, self.smoothed, self.status)


class HeartbeatNetwork:
    """All monitors of one simulation, so health can be read between steps."""

    def __init__(self, sim: Simulator, params: DetectorParams = DetectorParams()):
        self.sim = sim
        self.params = params
        self.monitors: dict[int, HeartbeatMonitor] = {}
        self.rows: list[IntervalRow] = []
        self.transitions: list[tuple[float, RankAddress, RankAddress, int, Health]] = []

    def monitor(self, addr: RankAddress) -> "HeartbeatMonitor":
        m = self.monitors.get(addr.world_rank)
        if m is None:
            m = self.monitors[addr.world_rank] = HeartbeatMonitor(self, addr)
        return m

    def status_of(self, addr: RankAddress, section: int | None = None) -> Health:
        """Worst opinion any replica currently holds about ``addr``."""
        out = []
        for other in replicas_of(addr, self.sim.world):
            m = self.monitors.get(other.world_rank)
            if m is None:
                continue
            out.append(m.opinion(addr, section))
        return worst(out)

    def ever_flagged(self, status: Health | None = None) -> set[RankAddress]:
        return {
            observed
            for _, _, observed, _, st in self.transitions
            if st is not Health.HEALTHY and (status is None or st is status)
        }

    def heartbeat_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for m in self.monitors.values():
            counts[m.addr.team] = counts.get(m.addr.team, 0) + m.emitted
        return counts

    def drain(self) -> None:
        """Finalize: every live rank folds the records still queued for it,
        so hashes sent at the last check point are voted on too."""
        for m in self.monitors.values():
            if self.sim.ranks[m.addr.world_rank].alive:
                m.compare_progress()


class HeartbeatMonitor:
    """Heartbeat state owned by one rank."""

    def __init__(self, network: HeartbeatNetwork, addr: RankAddress):
        self.net = network
        self.sim = network.sim
        self.params = network.params
        self.addr = addr
        self.replicas = replicas_of(addr, self.sim.world)
        self.emitted = 0
        self.protocol_errors = 0
        self.last_emit: float | None = None
        self.last_periodic: float | None = None
        self.local: dict[int, IntervalSeries] = {}
        self.remote: dict[tuple[int, int], IntervalSeries] = {}
        self.health: dict[tuple[int, int], RankHealth] = {}
        self.silence: dict[int, IntervalSeries] = {
            r.world_rank: IntervalSeries(self.params.alpha) for r in self.replicas
        }
        self._open: dict[int, float] = {}
        self._last_single: float | None = None
        self._remote_open: dict[tuple[int, int], float] = {}
        self._remote_single: dict[int, float] = {}
        self._seq: dict[int, int] = {}
        self._hash_index: dict[int, int] = {}
        self._hashes: dict[tuple[int, int], dict[int, int]] = {}
        self.verdicts: list[ConsistencyVerdict] = []
        self._task_running = False

    # -- emission -------------------------------------------------------------

    def _series(self, table: dict, key) -> IntervalSeries:
        s = table.get(key)
        if s is None:
            s = table[key] = IntervalSeries(self.params.alpha)
        return s

    def heartbeat(self, tag: int, buffer: bytes | None = None, final: bool = False) -> HeartbeatRecord | None:
        """Record, multicast and compare one heartbeat."""
        if not self.sim.context(self.addr).alive:
            return None
        now = self.sim.now
        section = abs(tag)
        interval = None
        if not final:
            if tag > 0:
                self._open[section] = now
            elif tag < 0:
                opened = self._open.pop(section, None)
                if opened is None:
                    self.protocol_errors += 1
                else:
                    interval = now - opened
            else:
                if self._last_single is not None:
                    interval = now - self._last_single
                self._last_single = now
        seq = self._seq.get(section, 0)
        self._seq[section] = seq + 1
        digest = None
        hash_index = -1
        if buffer is not None:
            digest = fnv1a_64(canonical_bytes(buffer))
            hash_index = self._hash_index.get(section, 0)
            self._hash_index[section] = hash_index + 1
        record = HeartbeatRecord(tag, now, self.addr, seq, digest, hash_index, final)
        for replica in self.replicas:
            self.sim.post_send(self.addr, replica, Channel.HEARTBEAT, tag, record, record.size_bytes)
        self.emitted += 0 if final else 1
        self.last_emit = now
        if interval is not None and interval > 0:
            smoothed = self._series(self.local, section).add(interval)
            self.net.rows.append(
                IntervalRow(now, self.addr.team, self.addr.team_rank, section, interval, smoothed,
                            self.net.status_of(self.addr, section).value)
            )
        if digest is not None:
            self._store_hash(section, hash_index, self.addr.team, digest)
        self.compare_progress()
        return record

    def emit_if_due(self, now: float, dt_hb: float) -> bool:
        """Periodic single-mode heartbeat, at most one per ``dt_hb``."""
        if self.last_periodic is not None and now - self.last_periodic < dt_hb:
            return False
        self.heartbeat(0)
        self.last_periodic = now
        return True

    def start_periodic(self, dt_hb: float | None = None, jitter: float = 0.0) -> None:
        """Self-rescheduling heartbeat task: one heartbeat whenever at least
        ``dt_hb`` has elapsed since the previous one."""
        dt_hb = self.params.dt_hb if dt_hb is None else dt_hb
        rng = self.sim.rng("heartbeat", self.addr.world_rank)
        owner = self.addr.world_rank
        self._task_running = True
        self.emit_if_due(self.sim.now, dt_hb)

        def tick():
            if not self._task_running:
                return
            self.emit_if_due(self.sim.now, dt_hb)
            due = max(self.last_periodic + dt_hb, self.sim.now)
            self.sim.schedule(due + rng.uniform(0.0, jitter), tick, owner, "heartbeat")

        self.sim.schedule(self.sim.now + dt_hb + rng.uniform(0.0, jitter), tick, owner, "heartbeat")

    def stop(self) -> None:
        """Announce regular termination so replicas do not time us out."""
        self._task_running = False
        self.heartbeat(0, final=True)

    # -- reception ------------------------------------------------------------

    def compare_progress(self) -> dict[tuple[int, int], IntervalSeries]:
        """Fold every delivered replica record into the interval series and
        reclassify.  Never blocks."""
        sim = self.sim
        touched: set[tuple[int, int]] = set()
        while True:
            msg = sim.poll_receive(self.addr, Channel.HEARTBEAT)
            if msg is None:
                break
            rec: HeartbeatRecord = msg.payload
            src = rec.sender.world_rank
            section = abs(rec.tag)
            silence = self.silence[src]
            silence.last_heard = sim.now
            key = (src, section)
            if rec.final:
                silence.final = True
                self._series(self.remote, key).final = True
                continue
            interval = None
            if rec.tag > 0:
                self._remote_open[key] = rec.emit_time
            elif rec.tag < 0:
                opened = self._remote_open.pop(key, None)
                if opened is not None:
                    interval = rec.emit_time - opened
            else:
                prev = self._remote_single.get(src)
                if prev is not None:
                    interval = rec.emit_time - prev
                self._remote_single[src] = rec.emit_time
            series = self._series(self.remote, key)
            series.last_heard = sim.now
            if interval is not None and interval > 0:
                series.add(interval)
                touched.add(key)
            if rec.consistency_hash is not None:
                self._store_hash(section, rec.hash_index, rec.sender.team, rec.consistency_hash)
        self._reclassify()
        return {k: self.remote[k] for k in touched}

    def _reclassify(self) -> None:
        now = self.sim.now
        for replica in self.replicas:
            src = replica.world_rank
            silence = self.silence[src]
            timed_out = classify(_EMPTY, silence, now, self.params).status is Health.FAILED
            sections = [k[1] for k in self.remote if k[0] == src] or [0]
            for section in sections:
                key = (src, section)
                prev = self.health.get(key)
                if prev is not None and prev.status is Health.FAILED:
                    continue
                if timed_out:
                    status = Health.FAILED
                elif is_slow(self.local.get(section, _EMPTY), self.remote.get(key, _EMPTY), self.params.tol):
                    status = Health.SLOW
                else:
                    status = Health.HEALTHY
                new = RankHealth(status, silence.last_heard)
                if prev is None or prev.status is not new.status:
                    self.net.transitions.append((now, self.addr, replica, section, new.status))
                self.health[key] = new

    def opinion(self, replica: RankAddress, section: int | None = None) -> Health:
        if section is None:
            return worst(h.status for (src, _), h in self.health.items() if src == replica.world_rank)
        h = self.health.get((replica.world_rank, section))
        return h.status if h is not None else Health.HEALTHY

    def self_diverging(self, section: int = 0) -> bool:
        """True when some replica runs this section markedly faster than we do."""
        local = self.local.get(section)
        if local is None or local.smoothed is None:
            return False
        for replica in self.replicas:
            remote = self.remote.get((replica.world_rank, section))
            if remote is not None and remote.smoothed is not None:
                if local.smoothed > self.params.tol * remote.smoothed:
                    return True
        return False

    # -- consistency ----------------------------------------------------------

    def _store_hash(self, section: int, index: int, team: int, digest: int) -> None:
        key = (section, index)
        table = self._hashes.setdefault(key, {})
        table[team] = digest
        if len(table) == self.sim.world.num_teams:
            kind, faulty, reason = vote(table, self.sim.world.num_teams)
            self.verdicts.append(ConsistencyVerdict(kind, section, index, faulty, reason))
            del self._hashes[key]

    def compare_consistency(self, buffer: bytes | Iterable[float | int], tag: int = 0) -> ConsistencyVerdict:
        """Piggyback the buffer hash on a heartbeat and return the newest
        complete verdict for this section (``PENDING`` if none yet)."""
        self.heartbeat(tag, canonical_bytes(buffer))
        section = abs(tag)
        for verdict in reversed(self.verdicts):
            if verdict.section == section:
                return verdict
        return ConsistencyVerdict(VerdictKind.PENDING, section)


def series_from_times(times: Iterable[float], alpha: float = 0.3) -> IntervalSeries:
    """Build a series from consecutive emit times (single-heartbeat mode)."""
    s = IntervalSeries(alpha)
    prev = None
    for t in times:
        if prev is not None:
            s.add(t - prev)
        prev = t
    return s
