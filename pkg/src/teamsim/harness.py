"""Experiment presets, cost accounting and output files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .faults import (
    DEFAULT_SCALE,
    EscalatingDelayPlan,
    FrequencyPolicy,
    SelectionPolicy,
    escalating_delay_plan,
    plan_to_json,
    scaled,
    schedule_injections,
    startup_delay,
)
from .heartbeat import Health, IntervalRow
from .netsim import Channel, FaultEvent, LatencyModel
from .tasksharing import StepRow
from .topology import WorldConfig
from .workloads import (
    BitFlip,
    HeartbeatMode,
    MiniappConfig,
    PingPongConfig,
    SolverConfig,
    SolverReport,
    run_miniapp,
    run_pingpong,
    run_solver,
)

SCHEMA_VERSION = 1
PRESET_NAMES = ("pingpong", "miniapp_grid", "variable_delay", "divergence", "saved_tasks", "scaling", "consistency")


@dataclass
class ExperimentPreset:
    """Everything needed to reproduce one run.

    ``options`` carries preset-specific overrides (``steps``, ``tasks_per_rank``
    and friends); anything left out takes the preset default.
    """

    name: str
    teams: int = 2
    ranks_per_team: int | None = None
    seed: int = 0
    scale: float = DEFAULT_SCALE
    sharing: bool | None = None
    fair_baseline: bool = False
    trace: bool = False
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.name!r}; choose from {', '.join(PRESET_NAMES)}")
        if self.teams < 1:
            raise ConfigError(f"teams must be >= 1, got {self.teams}")
        if self.ranks_per_team is not None and self.ranks_per_team < 1:
            raise ConfigError(f"ranks_per_team must be >= 1, got {self.ranks_per_team}")
        if not self.scale > 0:
            raise ConfigError(f"scale must be > 0, got {self.scale}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPreset":
        return cls(**json.loads(text))

    def opt(self, key: str, default):
        return self.options.get(key, default)


@dataclass(frozen=True)
class TeamCost:
    team: int
    compute_cost: float
    reused: int
    shared_bytes: int


@dataclass
class CostReport:
    workload: str
    scale: float
    teams: list[TeamCost]
    time_to_solution: float
    baseline_cost: float | None = None
    fair_baseline: bool = False

    @property
    def total_cost(self) -> float:
        return math.fsum(t.compute_cost for t in self.teams)

    @property
    def normalized_cost(self) -> float | None:
        if self.baseline_cost is None:
            if len(self.teams) == 1:
                return 1.0
            return None
        return self.total_cost / self.baseline_cost

    @classmethod
    def from_solver(cls, rep: SolverReport, scale: float, baseline_cost: float | None = None,
                    fair_baseline: bool = False) -> "CostReport":
        teams = [TeamCost(t, rep.compute_cost[t], rep.reused[t], rep.shared_bytes[t])
                 for t in sorted(rep.compute_cost)]
        if baseline_cost is None and len(teams) == 1:
            baseline_cost = teams[0].compute_cost
        return cls(rep.config.fingerprint(), scale, teams, rep.time_to_solution, baseline_cost, fair_baseline)

    def to_json(self) -> dict:
        return {
            "workload": json.loads(self.workload),
            "scale": self.scale,
            "teams": [asdict(t) for t in self.teams],
            "time_to_solution": self.time_to_solution,
            "total_cost": self.total_cost,
            "baseline_cost": self.baseline_cost,
            "normalized_cost": self.normalized_cost,
            "fair_baseline": self.fair_baseline,
        }


def compute_speedup(report_sharing: CostReport, report_baseline: CostReport) -> float:
    """Baseline time-to-solution over sharing time-to-solution."""
    if report_sharing.workload != report_baseline.workload or report_sharing.scale != report_baseline.scale:
        raise ConfigError("speedup needs reports of the same workload and scale")
    return report_baseline.time_to_solution / report_sharing.time_to_solution


@dataclass
class Frame:
    header: tuple[str, ...]
    rows: list[tuple]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


@dataclass
class PresetResult:
    frames: dict[str, Frame]
    cost: CostReport | None
    summary: dict
    plan: list[FaultEvent] = field(default_factory=list)
    trace: str | None = None

    def files(self) -> dict[str, str]:
        out = {name: frame.to_csv() for name, frame in self.frames.items()}
        out["summary.json"] = json.dumps(self.summary, sort_keys=True, indent=2) + "\n"
        out["plan.json"] = plan_to_json(self.plan)
        if self.trace is not None:
            out["trace.jsonl"] = self.trace
        return out

    def write(self, out_dir: str | os.PathLike) -> list[Path]:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in sorted(self.files().items()):
            p = d / name
            p.write_text(text)
            written.append(p)
        return written


def _step_frame(rows: list[StepRow]) -> Frame:
    return Frame(StepRow.CSV_HEADER, [r.as_csv() for r in rows])


def _heartbeat_frame(rows: list[IntervalRow]) -> Frame:
    return Frame(IntervalRow.CSV_HEADER, [r.as_csv() for r in rows])


def _divergence_frame(rep: SolverReport) -> Frame:
    a, b = rep.step_starts[0], rep.step_starts.get(1, rep.step_starts[0])
    return Frame(("step", "t_team0", "t_team1", "divergence"),
                 [(i, x, y, abs(x - y)) for i, (x, y) in enumerate(zip(a, b))])


def _solver_config(p: ExperimentPreset, **defaults) -> SolverConfig:
    d = {"ranks_per_team": p.ranks_per_team or 8}
    d.update(defaults)
    for key in ("steps", "tasks_per_rank", "shareable_cost", "nonshareable_cost", "step_jitter",
                "send_limit", "dt_hb", "outcome_size", "consistency_every"):
        if key in p.options:
            d[key] = p.options[key]
    return SolverConfig(**d)


def _solver_summary(rep: SolverReport) -> dict:
    out = {
        "time_to_solution": rep.time_to_solution,
        "finish_time": {str(k): v for k, v in rep.finish_time.items()},
        "compute_cost": {str(k): v for k, v in rep.compute_cost.items()},
        "computed": {str(k): v for k, v in rep.computed.items()},
        "reused": {str(k): v for k, v in rep.reused.items()},
        "reuse_fraction": rep.reuse_fraction(),
        "db_high_watermark": rep.db_high_watermark,
        "send_high_watermark": rep.send_high_watermark,
        "send_limit": rep.send_limit,
        "network_pending_high_watermark": rep.pending_high_watermark,
        "suppressed_shares": rep.suppressed_shares,
        "recheck_hits": rep.recheck_hits,
        "messages": rep.messages,
        "state_digest": {str(t): f"{rep.state_digest(t):016x}" for t in rep.final_state},
    }
    if rep.network is not None:
        out["heartbeats_emitted"] = {str(k): v for k, v in sorted(rep.network.heartbeat_counts().items())}
        out["ever_slow"] = sorted(str(a) for a in rep.network.ever_flagged(Health.SLOW))
        out["ever_failed"] = sorted(str(a) for a in rep.network.ever_flagged(Health.FAILED))
    return out


# -- presets ------------------------------------------------------------------


def _run_pingpong(p: ExperimentPreset) -> PresetResult:
    cfg = PingPongConfig(
        n_min=p.opt("n_min", 1),
        n_max=p.opt("n_max", 1 << 16),
        i_max=p.opt("i_max", 100),
        trials=p.opt("trials", 25),
    )
    if p.ranks_per_team not in (None, 2):
        raise ConfigError("pingpong runs exactly 2 ranks per team")
    latency = LatencyModel(p.opt("alpha", 1e-6), p.opt("beta", 1e9))
    rep = run_pingpong(cfg, WorldConfig.from_teams(p.teams, 2), latency, seed=p.seed)
    base = run_pingpong(cfg, WorldConfig.from_teams(1, 2), latency, seed=p.seed)
    summary = {
        "sizes": rep.sizes,
        "bandwidth": {str(t): v for t, v in rep.bandwidth.items()},
        "baseline_bandwidth": base.bandwidth[0],
        "bandwidth_matches_baseline": all(rep.bandwidth[t] == base.bandwidth[0] for t in rep.bandwidth),
        "intra_team_messages": {str(t): v for t, v in rep.intra_team_messages.items()},
        "baseline_intra_team_messages": base.intra_team_messages[0],
        "inter_replica_messages": rep.inter_replica_messages,
        "heartbeat_messages": rep.heartbeat_messages,
        "heartbeats_emitted": rep.heartbeats_emitted,
    }
    return PresetResult({"metrics.csv": Frame(rep.CSV_HEADER, rep.rows())}, None, summary)


def _run_miniapp_grid(p: ExperimentPreset) -> PresetResult:
    R = p.ranks_per_team or 2
    world = WorldConfig.from_teams(p.teams, R)
    iterations = p.opt("iterations", 100)
    work = p.opt("work_per_iter", 0.4)
    pause = p.opt("pause", 1.0)
    window = (0.0, iterations * work)
    everyone = world.addresses()
    target = world.address(0, 0)
    selections = {
        "constant": SelectionPolicy.constant(target),
        "round_robin": SelectionPolicy.round_robin(everyone),
        "random": SelectionPolicy.random(everyone),
    }
    # miniapp timings are already desk-sized; the scale factor is not applied
    frequencies = {
        "constant": FrequencyPolicy.constant(p.opt("interval", 5.0)),
        "decreasing": FrequencyPolicy.decreasing(p.opt("initial_interval", 16.0), 0.5),
        "random": FrequencyPolicy.random(3.0, 7.0),
    }
    rows = []
    grid = {}
    plans: list[FaultEvent] = []
    for sname, sel in selections.items():
        for fname, freq in frequencies.items():
            plan = schedule_injections(sel, freq, pause, window, seed=p.seed)
            plans.extend(plan)
            targets = {str(e.target) for e in plan}
            for mode in HeartbeatMode:
                cfg = MiniappConfig(iterations, work, mode, R)
                rep = run_miniapp(cfg, world, plan, seed=p.seed)
                flagged = sorted(str(a) for a in rep.flagged)
                rows.append((sname, fname, mode.value, len(plan), len(targets), len(flagged),
                             len(rep.lengthened), ";".join(flagged)))
                grid[f"{sname}/{fname}/{mode.value}"] = {
                    "injections": len(plan),
                    "targets": sorted(targets),
                    "flagged": flagged,
                    "lengthened": sorted(str(a) for a in rep.lengthened),
                }
    header = ("selection", "frequency", "mode", "injections", "targets", "flagged", "lengthened", "flagged_ranks")
    plans.sort(key=lambda e: (e.at, e.target.world_rank))
    return PresetResult({"metrics.csv": Frame(header, rows)}, None, {"grid": grid}, plans)


def _run_variable_delay(p: ExperimentPreset) -> PresetResult:
    cfg = _solver_config(p, steps=40)
    world = WorldConfig.from_teams(p.teams, cfg.ranks_per_team)
    target = world.address(0, min(1, cfg.ranks_per_team - 1))
    start = scaled(p.opt("start", 100.0), p.scale)
    run_end = start + scaled(p.opt("duration", 200.0), p.scale)
    plan = escalating_delay_plan(
        EscalatingDelayPlan(start, p.opt("initial_pause", 0.1), p.opt("increment", 0.1), target, cfg.dt_hb), run_end
    )
    sharing = False if p.sharing is None else p.sharing
    rep = run_solver(cfg, world, plan, sharing=sharing, seed=p.seed, fair_baseline=p.fair_baseline, trace=p.trace)
    summary = _solver_summary(rep)
    summary.update(detection_summary(rep, plan, target))
    frames = {"metrics.csv": _step_frame(rep.step_rows), "heartbeats.csv": _heartbeat_frame(rep.network.rows)}
    return PresetResult(frames, CostReport.from_solver(rep, p.scale, fair_baseline=p.fair_baseline), summary,
                        plan, rep.trace.to_jsonl() if rep.trace is not None else None)


def detection_summary(rep: SolverReport, plan: list[FaultEvent], target, threshold: float | None = None) -> dict:
    """When the target was first classified Slow, counted in its own heartbeats."""
    threshold = rep.config.dt_hb * 0.5 if threshold is None else threshold
    big = [e for e in plan if e.duration > threshold]
    first_big = big[0].at if big else None
    slow_at = [t for t, _, observed, _, st in rep.network.transitions if observed == target and st is Health.SLOW]
    detected = min(slow_at) if slow_at else None
    beats = None
    if first_big is not None and detected is not None:
        emitted = [r.time for r in rep.network.rows
                   if r.team == target.team and r.team_rank == target.team_rank and r.tag == 0]
        beats = sum(1 for t in emitted if first_big < t <= detected)
    return {
        "target": str(target),
        "first_pause_over_threshold": first_big,
        "detected_slow_at": detected,
        "heartbeats_to_detection": beats,
    }


def _delayed_start_plan(p: ExperimentPreset, world: WorldConfig) -> list[FaultEvent]:
    lo = scaled(p.opt("delay_lo", 45.0), p.scale)
    hi = scaled(p.opt("delay_hi", 65.0), p.scale)
    return [startup_delay(world.address(0, 0), lo, hi, seed=p.seed)]


def _run_divergence(p: ExperimentPreset) -> PresetResult:
    cfg = _solver_config(p, steps=100)
    world = WorldConfig.from_teams(max(p.teams, 2), cfg.ranks_per_team)
    plan = _delayed_start_plan(p, world)
    sharing = True if p.sharing is None else p.sharing
    rep = run_solver(cfg, world, plan, sharing=sharing, seed=p.seed, fair_baseline=p.fair_baseline, trace=p.trace)
    d = rep.divergence()
    summary = _solver_summary(rep)
    summary.update({
        "startup_delay": plan[0].duration,
        "divergence": d,
        "final_divergence": d[-1],
        "step_time": cfg.step_time,
        "first_step_below_step_time": next((i for i, x in enumerate(d) if x < cfg.step_time), None),
        "reuse_per_step": {str(t): rep.reuse_per_step(t) for t in range(world.num_teams)},
    })
    frames = {
        "metrics.csv": _step_frame(rep.step_rows),
        "divergence.csv": _divergence_frame(rep),
        "heartbeats.csv": _heartbeat_frame(rep.network.rows),
    }
    return PresetResult(frames, CostReport.from_solver(rep, p.scale, fair_baseline=p.fair_baseline), summary,
                        plan, rep.trace.to_jsonl() if rep.trace is not None else None)


def _run_saved_tasks(p: ExperimentPreset) -> PresetResult:
    res = _run_divergence(p)
    per_team = res.summary["reuse_per_step"]
    tasks = _solver_config(p).tasks_per_rank * (p.ranks_per_team or 8)
    last = p.opt("tail", 20)
    res.summary["tail_reuse_fraction"] = {t: sum(v[-last:]) / (last * tasks) for t, v in per_team.items()}
    return res


def _run_scaling(p: ExperimentPreset) -> PresetResult:
    cfg = _solver_config(p, steps=20, step_jitter=0.0)
    d = cfg.shareable_cost
    max_teams = max(p.teams, 3) if "max_teams" not in p.options else p.options["max_teams"]
    rows = []
    summary: dict = {"shareable_fraction": cfg.shareable_fraction, "speedup": {}, "cost": {}, "latency_sweep": []}
    base = run_solver(cfg, WorldConfig.from_teams(1, cfg.ranks_per_team), sharing=False, seed=p.seed)
    base_cost = CostReport.from_solver(base, p.scale)
    baseline_cost = base_cost.total_cost
    summary["cost"]["1"] = base_cost.to_json()
    rows.append((1, "off", 0.0, base_cost.total_cost, 1.0, base.time_to_solution, 0.0, 1.0))
    for k in range(2, max_teams + 1):
        world = WorldConfig.from_teams(k, cfg.ranks_per_team)
        off = run_solver(cfg, world, sharing=False, seed=p.seed)
        on = run_solver(cfg, world, sharing=True, seed=p.seed, fair_baseline=p.fair_baseline)
        c_off = CostReport.from_solver(off, p.scale, baseline_cost)
        c_on = CostReport.from_solver(on, p.scale, baseline_cost, p.fair_baseline)
        s = compute_speedup(c_on, c_off)
        summary["cost"][str(k)] = c_on.to_json()
        summary["speedup"][str(k)] = s
        rows.append((k, "off", 0.0, c_off.total_cost, c_off.normalized_cost, off.time_to_solution, 0.0, 1.0))
        rows.append((k, "on", 0.0, c_on.total_cost, c_on.normalized_cost, on.time_to_solution, on.reuse_fraction(), s))
    world = WorldConfig.from_teams(2, cfg.ranks_per_team)
    ref = CostReport.from_solver(run_solver(cfg, world, sharing=False, seed=p.seed), p.scale, baseline_cost)
    for factor in p.opt("latency_factors", [0.01, 0.1, 1.0, 10.0, 100.0]):
        lat = {Channel.TASK_SHARE: LatencyModel(alpha=factor * d)}
        rep = run_solver(cfg, world, sharing=True, latency=lat, seed=p.seed)
        c = CostReport.from_solver(rep, p.scale, baseline_cost)
        s = compute_speedup(c, ref)
        summary["latency_sweep"].append({"latency_factor": factor, "reuse_fraction": rep.reuse_fraction(), "speedup": s,
                                         "suppressed_shares": rep.suppressed_shares})
        rows.append((2, "on", factor, c.total_cost, c.normalized_cost, rep.time_to_solution, rep.reuse_fraction(), s))
    header = ("teams", "sharing", "latency_factor", "total_cost", "normalized_cost", "time_to_solution",
              "reuse_fraction", "speedup")
    return PresetResult({"metrics.csv": Frame(header, rows)}, base_cost, summary)


def _run_consistency(p: ExperimentPreset) -> PresetResult:
    teams = p.teams if p.teams >= 2 else 3
    flip_team = p.opt("flip_team", teams - 1)
    flip = None if flip_team is None else BitFlip(flip_team, p.opt("flip_step", 5), p.opt("flip_bit", p.seed))
    cfg = _solver_config(p, ranks_per_team=p.ranks_per_team or 2, steps=10, tasks_per_rank=8,
                         consistency_every=1, step_jitter=0.0)
    cfg = replace(cfg, bitflip=flip)
    world = WorldConfig.from_teams(teams, cfg.ranks_per_team)
    sharing = True if p.sharing is None else p.sharing
    rep = run_solver(cfg, world, sharing=sharing, seed=p.seed)
    rows = [(str(addr), v.index, v.kind.value, ";".join(map(str, v.faulty_teams)), v.reason)
            for addr, v in sorted(rep.verdicts, key=lambda x: (x[1].index, x[0].world_rank))]
    kinds: dict[str, int] = {}
    for _, v in rep.verdicts:
        kinds[v.kind.value] = kinds.get(v.kind.value, 0) + 1
    summary = _solver_summary(rep)
    summary.update({
        "bitflip": asdict(flip) if flip else None,
        "verdict_counts": kinds,
        "faulty_teams": sorted({t for _, v in rep.verdicts for t in v.faulty_teams}),
    })
    header = ("observer", "index", "verdict", "faulty_teams", "reason")
    return PresetResult({"metrics.csv": Frame(header, rows)}, None, summary)


_RUNNERS = {
    "pingpong": _run_pingpong,
    "miniapp_grid": _run_miniapp_grid,
    "variable_delay": _run_variable_delay,
    "divergence": _run_divergence,
    "saved_tasks": _run_saved_tasks,
    "scaling": _run_scaling,
    "consistency": _run_consistency,
}


def run_preset(preset: ExperimentPreset, out_dir: str | os.PathLike | None = None) -> PresetResult:
    res = _RUNNERS[preset.name](preset)
    res.summary = {
        "schema": SCHEMA_VERSION,
        "preset": json.loads(preset.to_json()),
        "cost": res.cost.to_json() if res.cost is not None else None,
        **res.summary,
    }
    if not preset.trace:
        res.trace = None
    if out_dir is not None:
        res.write(out_dir)
    return res
