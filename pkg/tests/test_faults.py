from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from teamsim.errors import DomainError
from teamsim.faults import (
    EscalatingDelayPlan,
    FrequencyPolicy,
    SelectionPolicy,
    escalating_delay_plan,
    plan_from_json,
    plan_to_json,
    scaled,
    schedule_injections,
    startup_delay,
)
from teamsim.netsim import FaultKind
from teamsim.topology import WorldConfig

W = WorldConfig.from_teams(2, 3)


def test_constant_frequency():
    plan = schedule_injections(SelectionPolicy.constant(W.address(0, 1)), FrequencyPolicy.constant(5.0), 1.0, (0.0, 25.0))
    assert [e.at for e in plan] == [5, 10, 15, 20, 25]
    assert {e.target for e in plan} == {W.address(0, 1)}
    assert all(e.kind is FaultKind.PAUSE and e.duration == 1.0 for e in plan)


def test_decreasing_frequency_stops_at_floor():
    times = FrequencyPolicy.decreasing(8.0, 0.5).times(0.0, 100.0, random.Random(0))
    assert times == [8, 12, 14, 15, 15.5, 15.75]


def test_random_frequency_gaps_in_range():
    times = FrequencyPolicy.random(3.0, 7.0).times(0.0, 200.0, random.Random(1))
    gaps = [b - a for a, b in zip([0.0] + times, times)]
    assert all(3.0 <= g <= 7.0 for g in gaps)
    assert times == FrequencyPolicy.random(3.0, 7.0).times(0.0, 200.0, random.Random(1))


def test_round_robin_and_across_teams():
    cands = [W.address(0, 0), W.address(1, 0), W.address(0, 2)]
    targets = SelectionPolicy.round_robin(cands).targets(5, random.Random(0))
    assert targets == cands + cands[:2]
    across = SelectionPolicy.across_teams(1, W)
    assert across.targets(4, random.Random(0)) == [W.address(0, 1), W.address(1, 1)] * 2


def test_random_selection_stays_in_candidates():
    cands = [W.address(1, r) for r in range(3)]
    picks = SelectionPolicy.random(cands).targets(50, random.Random(3))
    assert set(picks) <= set(cands) and len(set(picks)) > 1


def test_empty_window():
    assert schedule_injections(SelectionPolicy.constant(W.address(0, 0)), FrequencyPolicy.constant(1.0), 1.0, (5.0, 5.0)) == []


@pytest.mark.parametrize("make", [
    lambda: FrequencyPolicy.constant(0.0),
    lambda: FrequencyPolicy.decreasing(4.0, 1.5),
    lambda: FrequencyPolicy.random(5.0, 2.0),
    lambda: SelectionPolicy.round_robin([]),
    lambda: startup_delay(W.address(0, 0), 0.0, 1.0),
    lambda: scaled(1.0, 0.0),
])
def test_domain_errors(make):
    with pytest.raises(DomainError):
        make()


def test_escalating_plan():
    plan = escalating_delay_plan(EscalatingDelayPlan(10.0, 0.1, 0.1, W.address(0, 1)), 30.0)
    assert [round(e.at, 9) for e in plan[:6]] == [10.0, 11.1, 12.3, 13.6, 15.0, 16.5]
    assert [round(e.duration, 9) for e in plan[:4]] == [0.1, 0.2, 0.3, 0.4]
    assert plan[-1].at <= 30.0


def test_startup_delay_deterministic():
    a = startup_delay(W.address(0, 0), 4.5, 6.5, seed=7)
    b = startup_delay(W.address(0, 0), 4.5, 6.5, seed=7)
    assert a == b and a.at == 0.0 and 4.5 <= a.duration <= 6.5
    assert startup_delay(W.address(0, 0), 2.0, 2.0).duration == 2.0


def test_scaled():
    assert scaled(100.0) == 10.0
    assert scaled(100.0, 4.0) == 25.0


@given(st.integers(0, 2**31), st.floats(0.5, 10.0), st.floats(0.01, 2.0))
def test_plan_json_round_trip(seed, interval, pause):
    sel = SelectionPolicy.random(W.addresses())
    plan = schedule_injections(sel, FrequencyPolicy.constant(interval), pause, (0.0, 30.0), seed)
    assert plan_from_json(plan_to_json(plan), W) == plan
    assert plan == schedule_injections(sel, FrequencyPolicy.constant(interval), pause, (0.0, 30.0), seed)
