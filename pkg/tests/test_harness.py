from __future__ import annotations

import json

import pytest

from teamsim.cli import main
from teamsim.errors import ConfigError
from teamsim.harness import (
    PRESET_NAMES,
    CostReport,
    ExperimentPreset,
    compute_speedup,
    run_preset,
)
from teamsim.topology import WorldConfig
from teamsim.workloads import SolverConfig, run_solver

SMALL_OPTS = {"steps": 6, "tasks_per_rank": 8}


def test_preset_json_round_trip():
    p = ExperimentPreset("divergence", teams=3, ranks_per_team=2, seed=9, scale=4.0, sharing=False,
                         fair_baseline=True, options={"steps": 7})
    assert ExperimentPreset.from_json(p.to_json()) == p


@pytest.mark.parametrize("kw", [{"name": "nope"}, {"name": "scaling", "teams": 0}, {"name": "scaling", "scale": 0.0},
                                {"name": "scaling", "ranks_per_team": 0}])
def test_preset_validation(kw):
    with pytest.raises(ConfigError):
        ExperimentPreset(**kw)


def _small(name, **kw):
    return ExperimentPreset(name, ranks_per_team=2, options=dict(SMALL_OPTS), **kw)


@pytest.mark.parametrize("name", ["divergence", "consistency", "variable_delay"])
def test_outputs_byte_identical(tmp_path, name):
    a = run_preset(_small(name, seed=3), tmp_path / "a")
    b = run_preset(_small(name, seed=3), tmp_path / "b")
    assert a.files() == b.files()
    for f in a.files():
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_output_files_and_headers(tmp_path):
    res = run_preset(_small("divergence", trace=True), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["divergence.csv", "heartbeats.csv", "metrics.csv", "plan.json", "summary.json", "trace.jsonl"]
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == \
        "step,team,computed_count,reused_count,suppressed_shares,db_high_watermark"
    assert (tmp_path / "heartbeats.csv").read_text().splitlines()[0] == \
        "time,team,team_rank,tag,interval,smoothed,status"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema"] == 1 and summary["preset"]["name"] == "divergence"
    assert summary["cost"]["teams"][0]["team"] == 0
    first = json.loads((tmp_path / "trace.jsonl").read_text().splitlines()[0])
    assert "time" in first
    assert res.trace is not None


def test_seed_changes_outputs():
    a = run_preset(_small("divergence", seed=1)).files()
    b = run_preset(_small("divergence", seed=2)).files()
    assert a["divergence.csv"] != b["divergence.csv"]


def test_compute_speedup_and_mismatch():
    cfg = SolverConfig(ranks_per_team=2, steps=4, tasks_per_rank=8, shareable_cost=0.9 / 8, step_jitter=0.0)
    world = WorldConfig.from_teams(2, 2)
    on = CostReport.from_solver(run_solver(cfg, world, sharing=True), 10.0)
    off = CostReport.from_solver(run_solver(cfg, world, sharing=False), 10.0)
    assert 1.0 < compute_speedup(on, off) < 1 / (1 - 0.9 / 2)
    other = CostReport.from_solver(run_solver(SolverConfig(ranks_per_team=2, steps=5, tasks_per_rank=8), world), 10.0)
    with pytest.raises(ConfigError):
        compute_speedup(on, other)
    rescaled = CostReport.from_solver(run_solver(cfg, world, sharing=False), 5.0)
    with pytest.raises(ConfigError):
        compute_speedup(on, rescaled)


def test_single_team_cost_is_normalized():
    rep = run_solver(SolverConfig(ranks_per_team=2, steps=3, tasks_per_rank=4), WorldConfig.from_teams(1, 2))
    assert CostReport.from_solver(rep, 10.0).normalized_cost == 1.0


# -- CLI ------------------------------------------------------------------------------


def test_cli_protocols(capsys):
    assert main(["protocols", "--m", "10", "--r", "3", "--c", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mirror"] == 92 and out["parallel"] == 32


def test_cli_run_uses_teams_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TEAMS", "3")
    rc = main(["run", "consistency", "--out", str(tmp_path), "--option", "steps=6", "--seed", "1"])
    assert rc == 0
    line = json.loads(capsys.readouterr().out)
    assert "preset.json" in line["files"]
    saved = ExperimentPreset.from_json((tmp_path / "preset.json").read_text())
    assert saved.teams == 3 and saved.options == {"steps": 6}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["faulty_teams"] == [2]


def test_cli_preset_file_replays(tmp_path, capsys):
    main(["run", "consistency", "--teams", "2", "--out", str(tmp_path / "a"), "--option", "steps=6"])
    main(["run", "consistency", "--preset-file", str(tmp_path / "a" / "preset.json"), "--out", str(tmp_path / "b")])
    capsys.readouterr()
    for f in ("metrics.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("argv, error", [
    (["run", "scaling", "--teams", "0"], "ConfigError"),
    (["run", "scaling", "--option", "steps"], "ConfigError"),
    (["run", "nope"], "UsageError"),
    (["run", "scaling", "--sharing", "maybe"], "UsageError"),
])
def test_cli_errors_are_one_json_line(argv, error, capsys, tmp_path):
    try:
        rc = main(argv + ["--out", str(tmp_path)])
    except SystemExit as exc:
        rc = exc.code
    assert rc == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and json.loads(err[0])["error"] == error


def test_cli_bad_teams_env(monkeypatch, capsys, tmp_path):
    monkeypatch.setenv("TEAMS", "two")
    assert main(["run", "consistency", "--out", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_every_preset_name_is_runnable():
    assert set(PRESET_NAMES) == {"pingpong", "miniapp_grid", "variable_delay", "divergence", "saved_tasks",
                                 "scaling", "consistency"}
