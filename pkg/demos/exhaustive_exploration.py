"""
Exploring every interleaving of a small configuration
======================================================

Two ranks share one allreduce and a checkpoint may begin at any point.  The
explorer visits every reachable state, checks that no rank is ever told to
checkpoint inside a collective, and records which wrapper cases occurred.
Then each protocol fault is switched on to show the checks can fail.
"""

from manasim.explore import (ExploreConfig, explore, p2p_then_collective, replay_counterexample,
                             single_collective)

cfg = ExploreConfig(single_collective(2, "allreduce"))
rep = explore(cfg)
print(f"states {rep.distinct_states}, finished traces {rep.traces_explored}, "
      f"violations {len(rep.violations)}, deadlocks {rep.deadlock_count}")
print("wrapper cases seen:", "".join(sorted(rep.labels)))

# a protocol fault per line; the first counterexample is replayed with tracing
for mutant, progs in [("skip-extra-iteration", single_collective(2, "allreduce")),
                      ("no-phase2-gate", single_collective(2, "allreduce")),
                      ("drop-drained", p2p_then_collective(2)),
                      ("strict-gate", single_collective(2, "allreduce"))]:
    mcfg = ExploreConfig(progs, mutants=(mutant,))
    mrep = explore(mcfg, keep=1)
    if mrep.violations:
        v = mrep.violations[0]
        sim = replay_counterexample(v["counterexample"], mcfg, v["config"])
        last = sim.trace[-1]
        print(f"{mutant:21} {len(mrep.violations):4d} violations; replayed: "
              f"{sim.violations[0]['invariant']} at event {last['id']} ({last['actor']} {last['kind']})")
    else:
        print(f"{mutant:21} {mrep.deadlock_count:4d} deadlocks, e.g. schedule {mrep.deadlocks[0]}")
