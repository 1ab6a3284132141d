from __future__ import annotations

import pytest

from manasim.explore import (ExploreConfig, explore, p2p_then_collective, replay_counterexample,
                             single_collective, two_comms)
from manasim.simnet import ScheduleExhausted
from manasim.workloads import Coll


def test_single_rank_is_clean():
    rep = explore(ExploreConfig(single_collective(1, "allreduce")))
    assert rep.ok and rep.traces_explored >= 1


def test_two_rank_allreduce_sees_all_cases():
    rep = explore(ExploreConfig(single_collective(2, "allreduce")))
    assert rep.ok
    assert rep.labels == {"a", "b", "c", "d"}


def test_counts_are_deterministic():
    cfg = ExploreConfig(p2p_then_collective(2))
    a, b = explore(cfg), explore(cfg)
    assert (a.distinct_states, a.traces_explored) == (b.distinct_states, b.traces_explored)


@pytest.mark.parametrize("mutant,programs,invariant", [
    ("skip-extra-iteration", single_collective(2, "allreduce"), "theorem1"),
    ("no-phase2-gate", single_collective(2, "allreduce"), "theorem1"),
    ("drop-drained", p2p_then_collective(2), "drain-conservation"),
])
def test_mutants_are_caught_and_replay(mutant, programs, invariant):
    cfg = ExploreConfig(programs, mutants=(mutant,))
    rep = explore(cfg, keep=3)
    hits = [v for v in rep.violations if v["invariant"] == invariant]
    assert hits
    v = hits[0]
    sim = replay_counterexample(v["counterexample"], cfg, v["config"])
    assert sim.violations[0]["invariant"] == invariant
    assert sim.violations[0]["step"] == v["step"]


def test_strict_gate_deadlocks():
    rep = explore(ExploreConfig(single_collective(2, "allreduce"), mutants=("strict-gate",)))
    assert rep.deadlock_count and not rep.violations


def test_clean_replay_and_wrong_config():
    cfg = ExploreConfig(single_collective(2, "barrier"))
    rep = explore(cfg, keep=1)
    assert rep.window_entries
    sim = replay_counterexample(rep.window_entries[0]["counterexample"], cfg, rep.config)
    assert not sim.violations
    other = ExploreConfig(single_collective(3, "barrier"))
    with pytest.raises(ScheduleExhausted):
        replay_counterexample(rep.window_entries[0]["counterexample"], other, rep.config)
    with pytest.raises(ScheduleExhausted):
        replay_counterexample([99], cfg)


def test_bound_overflow_is_flagged():
    rep = explore(ExploreConfig(two_comms(2, "allreduce", "bcast"), max_states=200))
    assert rep.incomplete and not rep.ok


def test_config_bounds():
    with pytest.raises(ValueError):
        ExploreConfig([[]] * 5)
    with pytest.raises(ValueError):
        ExploreConfig([[Coll("barrier", "world", "x", "y")] * 3])
    with pytest.raises(ValueError):
        ExploreConfig(single_collective(2, "barrier"), mutants=("nope",))
