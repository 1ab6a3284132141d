from __future__ import annotations

import random

from manasim import engine as eng


def drive_collective(kind: str, op: str, contribs: list[bytes], root=None, reduce=None,
                     seed: int = 0, comm_members=None):
    """Run one collective on a bare engine with randomized delivery.

    Returns (outputs per member, list of (src, dst, payload_len) data messages).
    """
    n = len(contribs) if comm_members is None else max(comm_members) + 1
    lh = eng.engine_init(eng.engine_id(kind), n)
    comm = lh.world if comm_members is None else eng.comm_create(lh, lh.world, comm_members)
    mem = eng.members(lh, comm)
    nbytes = len(contribs[0])
    spec = eng.CollectiveSpec(op, comm, root, reduce, nbytes)
    acs = {r: eng.start_collective(lh, r, spec, contribs[i]) for i, r in enumerate(mem)}
    rng = random.Random(seed)
    flight: list[eng.Envelope] = []
    msgs = []
    while True:
        moves = [("run", r) for r, ac in acs.items() if not ac.done and eng.collective_ready(lh, r, ac)]
        moves += [("deliver", i) for i in range(len(flight))]
        if not moves:
            break
        what, x = rng.choice(moves)
        if what == "deliver":
            eng.deliver(lh, flight.pop(x))
            continue
        env, fault = eng.collective_step(lh, x, acs[x])
        assert fault is None
        if env is not None:
            flight.append(env)
            msgs.append((env.src, env.dst, len(env.payload)))
    assert all(ac.done for ac in acs.values()), "collective did not finish"
    return [acs[r].output for r in mem], msgs


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
