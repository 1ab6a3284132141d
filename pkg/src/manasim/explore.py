"""Exhaustive interleaving exploration of small configurations.

Depth-first search over every enabled-event choice, pruning states already
visited.  Every step is checked by the simulation's inline monitors
(collective safety at do-ckpt, Axiom/Lemma ordering, drain conservation);
quiescent states with unfinished work are deadlocks.  Violations and
deadlocks come with a scripted schedule that reproduces them.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import engine as eng
from .runtime import MUTANTS, Simulation
from .simnet import Schedule, ScheduleExhausted
from .workloads import (Coll, CommCreate, CommDup, Compute, Op, Recv, Send, u32)

MAX_WORLD = 4
MAX_WRAPPERS = 2
MAX_P2P = 4


@dataclass(frozen=True)
class ExploreConfig:
    programs: tuple
    engine: str = "linear"
    injection: str = "at-every-prefix"
    event_set: tuple[int, ...] = ()
    depth_bound: int = 5000
    max_states: int = 3_000_000
    mutants: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "programs", tuple(tuple(p) for p in self.programs))
        if not 1 <= self.world_size <= MAX_WORLD:
            raise ValueError(f"world size {self.world_size} outside 1..{MAX_WORLD}")
        for r, p in enumerate(self.programs):
            nw = sum(isinstance(op, Coll) for op in p)
            npp = sum(isinstance(op, (Send, Recv)) for op in p)
            if nw > MAX_WRAPPERS or npp > MAX_P2P:
                raise ValueError(f"rank {r}: {nw} collectives / {npp} p2p ops exceed bounds "
                                 f"{MAX_WRAPPERS}/{MAX_P2P}")
        if self.injection not in ("at-every-prefix", "at-event-set", "none"):
            raise ValueError(f"unknown injection {self.injection!r}")
        if set(self.mutants) - set(MUTANTS):
            raise ValueError(f"unknown mutants {self.mutants}")

    @property
    def world_size(self) -> int:
        return len(self.programs)

    def fingerprint(self) -> str:
        blob = repr((self.programs, self.engine, self.injection, self.event_set,
                     tuple(sorted(self.mutants))))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def new_simulation(self, record: bool = False) -> Simulation:
        return Simulation(
            self.programs, eng.engine_id(self.engine),
            inject_checkpoint=self.injection == "at-every-prefix",
            ckpt_at=self.event_set if self.injection == "at-event-set" else (),
            mutants=self.mutants, record=record)


@dataclass
class VerificationReport:
    config: str
    traces_explored: int = 0
    distinct_states: int = 0
    violations: list[dict] = field(default_factory=list)
    deadlocks: list[list[int]] = field(default_factory=list)
    deadlock_count: int = 0
    window_entries: list[dict] = field(default_factory=list)
    labels: set[str] = field(default_factory=set)
    max_depth: int = 0
    incomplete: bool = False

    @property
    def ok(self) -> bool:
        return not self.violations and not self.deadlocks and not self.incomplete

    def merge(self, other: VerificationReport) -> None:
        self.traces_explored += other.traces_explored
        self.distinct_states += other.distinct_states
        self.violations += other.violations
        self.deadlocks += other.deadlocks
        self.deadlock_count += other.deadlock_count
        self.window_entries += other.window_entries
        self.labels |= other.labels
        self.max_depth = max(self.max_depth, other.max_depth)
        self.incomplete |= other.incomplete

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "traces_explored": self.traces_explored,
            "distinct_states": self.distinct_states,
            "violations": self.violations,
            "deadlocks": self.deadlocks,
            "deadlock_count": self.deadlock_count,
            "window_entries": self.window_entries,
            "lemma2_labels": sorted(self.labels),
            "max_depth": self.max_depth,
            "incomplete": self.incomplete,
        }


def _settle(sim: Simulation) -> None:
    """Fire forced events; they take no schedule decision."""
    while True:
        eid = sim.forced_event()
        if eid is None:
            return
        sim.fire(eid)


def _search(cfg: ExploreConfig, root: Simulation, prefix: list[int], keep: int) -> VerificationReport:
    rep = VerificationReport(cfg.fingerprint())
    visited: set[int] = set()
    _settle(root)
    visited.add(hash(root.state_key()))
    rep.distinct_states = 1
    stack = [(root, prefix, root.enabled_events(), 0)]
    while stack:
        sim, path, enabled, i = stack.pop()
        if not enabled:
            if sim.complete:
                rep.traces_explored += 1
            else:
                rep.deadlock_count += 1
                if len(rep.deadlocks) < keep:
                    rep.deadlocks.append(path)
            continue
        if i + 1 < len(enabled):
            stack.append((sim, path, enabled, i + 1))
        child = sim.clone()
        child.fire(enabled[i])
        _settle(child)
        cpath = path + [i]
        rep.max_depth = max(rep.max_depth, len(cpath))
        if len(child.window_entries) > len(sim.window_entries) and len(rep.window_entries) < keep:
            rep.window_entries.append({"counterexample": cpath, "config": rep.config,
                                       **child.window_entries[-1]})
        rep.labels |= child.labels
        if len(child.violations) > len(sim.violations):
            v = child.violations[len(sim.violations)]
            rep.violations.append({"invariant": v["invariant"], "detail": v["detail"],
                                   "step": v["step"], "counterexample": cpath,
                                   "config": rep.config})
            continue
        k = hash(child.state_key())
        if k in visited:
            rep.traces_explored += 1 if not child.enabled_events() and child.complete else 0
            continue
        visited.add(k)
        rep.distinct_states += 1
        if len(cpath) >= cfg.depth_bound or rep.distinct_states >= cfg.max_states:
            rep.incomplete = True
            continue
        stack.append((child, cpath, child.enabled_events(), 0))
    return rep


def _subtree(args) -> VerificationReport:
    cfg, i, keep = args
    root = cfg.new_simulation()
    _settle(root)
    root.fire(root.enabled_events()[i])
    _settle(root)
    return _search(cfg, root, [i], keep)


def explore(cfg: ExploreConfig, workers: int = 1, keep: int = 20) -> VerificationReport:
    """Explore every interleaving of ``cfg`` up to its bounds.

    With ``workers > 1`` the first decision level is split across processes;
    each subtree keeps its own visited set, so state counts then include
    states reached from more than one subtree.
    """
    if workers <= 1:
        return _search(cfg, cfg.new_simulation(), [], keep)
    root = cfg.new_simulation()
    _settle(root)
    n = len(root.enabled_events())
    rep = VerificationReport(cfg.fingerprint(), distinct_states=1)
    with ProcessPoolExecutor(workers) as ex:
        for sub in ex.map(_subtree, [(cfg, i, keep) for i in range(n)]):
            rep.merge(sub)
    return rep


def replay_counterexample(decisions: list[int], cfg: ExploreConfig, fingerprint: str | None = None):
    """Re-run a reported schedule with tracing on.  Returns the simulation."""
    if fingerprint is not None and fingerprint != cfg.fingerprint():
        raise ScheduleExhausted(f"schedule recorded for configuration {fingerprint}, "
                                f"not {cfg.fingerprint()}")
    sim = cfg.new_simulation(record=True)
    sched = Schedule.scripted(decisions)
    _settle(sim)
    while sched.cursor < len(decisions):
        enabled = sim.enabled_events()
        if not enabled:
            raise ScheduleExhausted(f"quiescent after {sched.cursor} of {len(decisions)} decisions")
        sim.fire(enabled[sched.choose(len(enabled))])
        _settle(sim)
    return sim


# ---------------------------------------------------------------------------
# standard configurations


def _coll(op: str, comm: str, n: int, r: int, root: int | None = None) -> list[Op]:
    words = n if op == "alltoall" else 1
    setup = Compute("set", ("c", u32(*[r * 10 + i + 1 for i in range(words)])))
    if op in ("bcast", "gather"):
        root = 0 if root is None else root
    reduce = "sum" if op == "allreduce" else None
    return [setup, Coll(op, comm, "c", f"out_{comm}", root=root, reduce=reduce)]


def single_collective(n: int, op: str) -> list[list[Op]]:
    return [_coll(op, "world", n, r) for r in range(n)]


def p2p_then_collective(n: int, op: str = "allreduce") -> list[list[Op]]:
    """Rank 0 sends to rank 1 before the collective; the receive comes after,
    so a checkpoint can catch the message in flight."""
    progs = []
    for r in range(n):
        p: list[Op] = []
        if r == 0:
            p += [Compute("set", ("m", u32(100))), Send(1, 3, "world", "m")]
        p += _coll(op, "world", n, r)
        if r == 1:
            p.append(Recv(0, 3, "world", "got"))
        progs.append(p)
    return progs


def two_comms(n: int, op_a: str, op_b: str) -> list[list[Op]]:
    """Two wrappers per rank on two distinct communicators.

    With three ranks the communicators are {0,1} and {1,2}, so ranks 0 and 2
    run their collectives concurrently while rank 1 takes part in both.
    """
    progs = []
    if n == 2:
        for r in range(n):
            p: list[Op] = [CommDup("world", "dup")]
            p += _coll(op_a, "world", n, r)
            p += _coll(op_b, "dup", n, r)
            progs.append(p)
        return progs
    a, b = (0, 1), (1, 2)
    for r in range(n):
        p = []
        if r in a:
            p.append(CommCreate("world", a, "A"))
        if r in b:
            p.append(CommCreate("world", b, "B"))
        if r in a:
            p += _coll(op_a, "A", 2, a.index(r))
        if r in b:
            p += _coll(op_b, "B", 2, b.index(r))
        progs.append(p)
    return progs


def acceptance_configs(engine: str = "linear") -> list[ExploreConfig]:
    cfgs = []
    for op in eng.OPS:
        cfgs.append(ExploreConfig(single_collective(2, op), engine, name=f"w2-{op}"))
    cfgs.append(ExploreConfig(p2p_then_collective(2), engine, name="w2-p2p-allreduce"))
    cfgs.append(ExploreConfig(two_comms(2, "allreduce", "bcast"), engine, name="w2-two-comms"))
    cfgs.append(ExploreConfig(single_collective(3, "allreduce"), engine, name="w3-allreduce"))
    cfgs.append(ExploreConfig(p2p_then_collective(3, "barrier"), engine, name="w3-p2p-barrier"))
    cfgs.append(ExploreConfig(two_comms(3, "allreduce", "allreduce"), engine, name="w3-two-comms"))
    return cfgs


def report_json(rep: VerificationReport) -> str:
    return json.dumps(rep.to_json(), indent=1, sort_keys=True, default=list)
