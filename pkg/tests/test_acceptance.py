"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed together at the
end of the pytest run.  Run alone with ``pytest tests/test_acceptance.py``.
"""

from __future__ import annotations

import random
from collections import Counter
from functools import lru_cache

import pytest

from manasim import Schedule, Simulation, engine_id, run
from manasim import engine as eng
from manasim.ckptstore import RealIdLeak, decode_image, encode_image, load_images
from manasim.cli import metrics
from manasim.explore import (ExploreConfig, acceptance_configs, explore, p2p_then_collective,
                             replay_counterexample, single_collective)
from manasim.harness import checkpoint_run, native_run, restart_run
from manasim.simnet import trace_bytes, write_trace
from manasim.upperhalf import CorruptImage
from manasim.workloads import BUILDERS, WorkloadSpec, random_p2p

RESULTS: list[str] = []

# the corpus for restart criteria: world size 4, each run at most 300 events
RESTART_CORPUS = [("ring-pingpong", 3), ("iter-allreduce", 3), ("comm-split-mix", 1)]
DRAIN_SEEDS = 1000


def record(cid: str, title: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"{cid} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@lru_cache(maxsize=None)
def exploration():
    reps = {}
    for engine in ("linear", "binomial"):
        for cfg in acceptance_configs(engine):
            reps[(engine, cfg.name)] = explore(cfg)
    return reps


@lru_cache(maxsize=None)
def restart_corpus():
    """Checkpoint at every event index under each engine; keep the image sets."""
    out = []
    for name, steps in RESTART_CORPUS:
        spec = WorkloadSpec(name, 4, steps=steps)
        for engine in ("linear", "binomial"):
            want = native_run(spec, engine, seed=2)
            assert want.steps <= 300
            for i in range(want.steps):
                sim = checkpoint_run(spec, i, engine, seed=2)
                out.append((spec, engine, i, want.digest(), sim))
    return out


def test_c1_theorem1_safety():
    reps = exploration()
    bad = {k: r.violations[0] for k, r in reps.items() if r.violations}
    partial = [k for k, r in reps.items() if r.incomplete]
    states = sum(r.distinct_states for r in reps.values())
    ok = not bad and not partial
    record("C1", "Theorem-1 safety (exhaustive, world 2-3)", ok,
           f"{len(reps)} configurations, {states} distinct states, "
           f"{len(bad)} with violations, {len(partial)} bounded-incomplete")
    assert ok, (bad, partial)


def test_c2_theorem2_liveness_and_window():
    reps = exploration()
    dead = {k: r.deadlock_count for k, r in reps.items() if r.deadlock_count}
    no_finish = [k for k, r in reps.items() if r.traces_explored == 0]
    window = {k: len(r.window_entries) for k, r in reps.items() if r.window_entries}
    ok = not dead and not no_finish and not window
    record("C2", "Theorem-2 liveness + intend/do-ckpt window", ok,
           f"deadlocks {sum(dead.values())}, configs never finishing {len(no_finish)}; "
           f"phase-2 entries inside the intend..do-ckpt window in {len(window)}/{len(reps)} "
           f"configurations (free-pass refinement, see ledger)")
    assert not dead and not no_finish, (dead, no_finish)
    assert not window, f"phase-2 entered inside the window: {window}"


def test_c3_mutants_are_caught():
    cases = [
        ("skip-extra-iteration", single_collective(2, "allreduce")),
        ("no-phase2-gate", single_collective(2, "allreduce")),
        ("drop-drained", p2p_then_collective(2)),
    ]
    lines, ok = [], True
    for mutant, progs in cases:
        cfg = ExploreConfig(progs, mutants=(mutant,))
        rep = explore(cfg, keep=1)
        replayed = False
        if rep.violations:
            v = rep.violations[0]
            sim = replay_counterexample(v["counterexample"], cfg, v["config"])
            replayed = bool(sim.violations) and sim.violations[0]["step"] == v["step"] \
                and sim.violations[0]["invariant"] == v["invariant"]
        ok &= replayed
        lines.append(f"{mutant}: {len(rep.violations)} violations, replay {'ok' if replayed else 'FAILED'}")
    record("C3", "checker non-vacuity", ok, "; ".join(lines))
    assert ok, lines


def test_c4_restart_equivalence():
    total = good = 0
    for spec, engine, i, want, sim in restart_corpus():
        total += 1
        images = sim.images[0]
        good += (not sim.violations and sim.digest() == want
                 and restart_run(images, spec, engine, seed=i).digest() == want)
    ok = good == total
    record("C4", "restart equivalence at every event index", ok, f"{good}/{total} image sets")
    assert ok


def test_c5_cross_engine_restart():
    total = good = 0
    for spec, engine, i, want, sim in restart_corpus():
        other = "binomial" if engine == "linear" else "linear"
        total += 1
        good += restart_run(sim.images[0], spec, other, seed=i + 1).digest() == want
    ok = good == total
    record("C5", "cross-engine restart (linear<->binomial)", ok, f"{good}/{total} image sets")
    assert ok


def _conservation_oracle(images: dict[int, bytes], n: int) -> list[str]:
    """sent == received + drained per (src, dst, comm, tag), from images alone."""
    states = load_images(images, n)
    errs = []
    keys = set()
    for s in states:
        keys |= {(s.rank, d, g, t) for (d, g, t) in s.sent}
        keys |= {(src, s.rank, g, t) for (src, g, t) in s.received}
        keys |= {(d.src, s.rank, s.handles[d.vid].gid, d.tag) for d in s.drained}
    for (src, dst, gid, tag) in sorted(keys):
        sent = states[src].sent.get((dst, gid, tag), 0)
        got = states[dst].received.get((src, gid, tag), 0)
        held = sum(1 for d in states[dst].drained
                   if d.src == src and d.tag == tag and states[dst].handles[d.vid].gid == gid)
        if sent != got + held:
            errs.append(f"{(src, dst, gid, tag)}: sent {sent} received {got} drained {held}")
    return errs


def test_c6_drain_conservation():
    failures, drained, images_checked = [], 0, 0
    for seed in range(DRAIN_SEEDS):
        rng = random.Random(seed)
        n = rng.choice((2, 3, 4))
        progs = random_p2p(seed, n, messages=rng.randrange(4, 16))
        native = run(Simulation(progs, engine_id("linear")), Schedule.seeded(seed))
        at = sorted(rng.sample(range(native.steps), 2))
        sim = run(Simulation(progs, engine_id(rng.choice(("linear", "binomial"))), ckpt_at=at),
                  Schedule.seeded(seed))
        sends = Counter(e["eid"] for rec in sim.trace for e in rec["detail"]["effects"]
                        if e["kind"] == "p2p-send" and e["ctx"] == eng.P2P)
        recvs = Counter(e["eid"] for rec in sim.trace for e in rec["detail"]["effects"]
                        if e["kind"] == "p2p-recv")
        dup = [eid for eid, k in recvs.items() if k > 1]
        lost = set(sends) - set(recvs)
        errs = []
        for epoch, images in sim.images.items():
            images_checked += 1
            errs += _conservation_oracle(images, n)
            held = [d.eid for data in images.values() for d in decode_image(data).drained]
            errs += [f"duplicate drained eid {e}" for e, k in Counter(held).items() if k > 1]
        drained += sum(e["drained"] for rec in sim.trace for e in rec["detail"]["effects"]
                       if e["kind"] == "image-write")
        if errs or dup or lost or sim.violations or sim.digest() != native.digest():
            failures.append((seed, errs[:2], dup, sorted(lost), sim.violations[:1]))
    ok = not failures
    record("C6", "drain conservation, randomized p2p sweep", ok,
           f"{DRAIN_SEEDS} seeds, {images_checked} image sets, {drained} messages drained, "
           f"{len(failures)} failing seeds")
    assert ok, failures[:3]


def test_c7_structural_overhead():
    bad = []
    runs = 0
    for name in sorted(BUILDERS):
        for engine in ("linear", "binomial"):
            for seed in range(5):
                sim = native_run(WorkloadSpec(name, 4, steps=3), engine, seed)
                m = metrics(sim.trace)
                kinds = {e["kind"] for rec in sim.trace for e in rec["detail"]["effects"]}
                protocol = kinds & {"ctl-send", "ctl-deliver", "coord-note", "image-write"}
                runs += 1
                if m["extra-barriers"] != m["collectives"] or m["ctl-messages"] or protocol:
                    bad.append((name, engine, seed, m, protocol))
    for spec, engine, i, _, sim in restart_corpus()[::17]:
        m = metrics(sim.trace)
        runs += 1
        if m["extra-barriers"] != m["collectives"]:
            bad.append((spec.name, engine, i, m))
    ok = not bad
    record("C7", "extra-barriers == collectives, no protocol traffic without checkpoints", ok,
           f"{runs} runs, {len(bad)} mismatches")
    assert ok, bad[:3]


def test_c8_determinism(tmp_path):
    mismatches, runs = [], 0
    for name in sorted(BUILDERS):
        for engine in ("linear", "binomial"):
            for seed in (0, 1, 77):
                spec = WorkloadSpec(name, 4, steps=2, seed=seed)
                for at in (None, 25):
                    files = []
                    for k in range(2):
                        sim = native_run(spec, engine, seed) if at is None else \
                            checkpoint_run(spec, at, engine, seed)
                        p = tmp_path / f"{name}-{engine}-{seed}-{at}-{k}.ndjson"
                        write_trace(sim.trace, p)
                        files.append(p.read_bytes())
                    runs += 1
                    if files[0] != files[1]:
                        mismatches.append((name, engine, seed, at))
    ok = not mismatches
    record("C8", "determinism (byte-identical trace files)", ok,
           f"{runs} run pairs, {len(mismatches)} differ")
    assert ok, mismatches


def test_c9_image_format():
    corpus = restart_corpus()
    images = [data for *_, sim in corpus for data in sim.images[0].values()]
    roundtrip_bad = sum(encode_image(decode_image(d)) != d for d in images)
    sample = images[::97]
    trunc_missed = 0
    for d in sample:
        for n in range(len(d)):
            try:
                decode_image(d[:n])
                trunc_missed += 1
            except CorruptImage:
                pass
    leaks_missed = 0
    for d in sample:
        uh = decode_image(d)
        for where in ("memory", "pc", "sent", "wrappers"):
            s = decode_image(d)
            real = eng.RealCommId(1000)
            if where == "memory":
                s.memory["leak"] = real
            elif where == "pc":
                s.pc = real
            elif where == "sent":
                s.sent[(0, "w", 0)] = real
            else:
                s.wrappers["w"] = real
            try:
                encode_image(s)
                leaks_missed += 1
            except RealIdLeak:
                pass
        assert uh == decode_image(d)
    ok = not roundtrip_bad and not trunc_missed and not leaks_missed
    record("C9", "image format", ok,
           f"{len(images)} images round-trip ({roundtrip_bad} differ); "
           f"{len(sample)} images x every truncation ({trunc_missed} accepted); "
           f"real-id plants accepted {leaks_missed}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
