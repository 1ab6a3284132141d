"""The simulated world: ranks, helpers, coordinator and fabric on one kernel.

Actors are ``rank-i`` (application logic and its checkpoint helper) and
``coordinator``.  Each step executes one of

* ``app``: one op or collective micro-step of a rank's application;
* ``deliver-data`` / ``deliver-control``: the head message of a channel;
* ``drain``: a rank's helper drains and writes its image;
* ``begin-checkpoint``: the coordinator starts a checkpoint.

Safety monitors run inline and append to ``violations``.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable

from . import coordinator as co
from . import drain as dr
from . import engine as eng
from . import upperhalf as uhm
from .ckptstore import encode_image
from .engine import ANY, EngineId, LowerHalf
from .simnet import Event, Kernel, Quiescent, Schedule
from .upperhalf import PendingCollective, UpperHalfState, WrapperPhase
from .workloads import (Coll, CommCreate, CommCreateGroup, CommDup, Compute, GroupIncl, Recv,
                        Send, memory_digest, run_compute)

COORD = co.COORD
DATA = "data"
CTL = "ctl"

MUTANTS = ("skip-extra-iteration", "no-phase2-gate", "drop-drained", "strict-gate")


class Deadlock(RuntimeError):
    def __init__(self, msg: str, sim: Simulation) -> None:
        super().__init__(msg)
        self.sim = sim


class InvariantViolation(RuntimeError):
    pass


def actor_name(a: int) -> str:
    return "coordinator" if a == COORD else f"rank-{a}"


def _vid_bytes(vid: int) -> bytes:
    return struct.pack("<Q", vid)


class Rank:
    """Runtime of one rank: its upper half plus transient execution state."""

    __slots__ = ("uh", "helper", "active", "contribution", "at_gate", "app_eid", "drain_eid")

    def __init__(self, uh: UpperHalfState) -> None:
        self.uh = uh
        self.helper = co.Helper()
        self.active: eng.ActiveCollective | None = None
        self.contribution = b""
        self.at_gate = False
        self.app_eid: int | None = None
        self.drain_eid: int | None = None

    def clone(self) -> Rank:
        r = Rank.__new__(Rank)
        r.uh = self.uh.clone()
        r.helper = self.helper.clone()
        r.active = None if self.active is None else self.active.clone()
        r.contribution = self.contribution
        r.at_gate = self.at_gate
        r.app_eid = self.app_eid
        r.drain_eid = self.drain_eid
        return r

    def key(self) -> tuple:
        return (self.uh.key(), self.helper.key(),
                None if self.active is None else self.active.key(),
                self.contribution, self.at_gate, self.app_eid is None, self.drain_eid is None)


class Simulation(Kernel):
    """One deterministic run of ``programs`` on ``engine``.

    ``ckpt_at`` lists step counts at which the coordinator is forced to begin
    a checkpoint.  ``inject_checkpoint`` instead makes a single
    begin-checkpoint an ordinary enabled event, so a schedule (or the
    explorer) chooses when it happens.  ``mutants`` switches on protocol
    faults used to show the monitors can fail.
    """

    def __init__(self, programs, engine: EngineId, *, ckpt_at: Iterable[int] = (),
                 inject_checkpoint: bool = False, mutants: Iterable[str] = (),
                 record: bool = True, max_steps: int = 1_000_000,
                 _states: list[UpperHalfState] | None = None) -> None:
        super().__init__(record=record)
        self.programs = [tuple(p) for p in programs]
        self.n = len(self.programs)
        self.engine = engine
        self.lh = eng.engine_init(engine, self.n)
        self.mutants = frozenset(mutants)
        bad = self.mutants - set(MUTANTS)
        if bad:
            raise ValueError(f"unknown mutants {sorted(bad)}")
        self.coord = co.CoordinatorState(self.n, "skip-extra-iteration" in self.mutants)
        self.channels: dict[tuple[int, int, str], list[tuple[int, object]]] = {}
        self.ckpt_at = sorted(ckpt_at)
        self.inject_eid: int | None = None
        self.max_steps = max_steps
        self.violations: list[dict] = []
        self.window_entries: list[dict] = []
        self.faults: list[dict] = []
        self.labels: set[str] = set()
        self.images: dict[int, dict[int, bytes]] = {}
        self.image_steps: dict[int, int] = {}
        self.intend_delivered = 0
        self.window_open = False
        self.obligations: tuple = ()
        self.ranks: list[Rank] = []
        for r in range(self.n):
            if _states is None:
                uh = uhm.new_upper_half(r, self.lh)
            else:
                uh = uhm.rebuild_lower_half(_states[r], self.lh)
            self.ranks.append(Rank(uh))
        for r, rk in enumerate(self.ranks):
            if not self._finished(r):
                rk.app_eid = self.schedule_event(actor_name(r), "app", r)
        if inject_checkpoint:
            self.inject_eid = self.schedule_event("coordinator", "begin-checkpoint")

    @classmethod
    def from_images(cls, programs, engine: EngineId, states: list[UpperHalfState], **kw) -> Simulation:
        return cls(programs, engine, _states=states, **kw)

    # ------------------------------------------------------------------ copy/hash

    def clone(self) -> Simulation:
        s = Simulation.__new__(Simulation)
        s.__dict__.update(self.__dict__)
        s.queue = self.queue.clone()
        s.trace = list(self.trace) if self.record else []
        s.lh = self.lh.clone()
        s.coord = self.coord.clone()
        s.channels = {k: list(v) for k, v in self.channels.items() if v}
        s.ckpt_at = list(self.ckpt_at)
        s.violations = list(self.violations)
        s.window_entries = list(self.window_entries)
        s.faults = list(self.faults)
        s.labels = set(self.labels)
        s.images = {e: dict(v) for e, v in self.images.items()}
        s.image_steps = dict(self.image_steps)
        s.ranks = [r.clone() for r in self.ranks]
        return s

    def state_key(self) -> tuple:
        """Everything that can influence the future, without event ids."""
        return (
            tuple(r.key() for r in self.ranks),
            self.lh.key(),
            self.coord.key(),
            tuple(sorted((k, tuple(m[1][1:] if k[2] == DATA else m[1] for m in v))
                         for k, v in self.channels.items() if v)),
            self.inject_eid is None,
            self.intend_delivered,
            self.window_open,
            self.obligations,
        )

    # ------------------------------------------------------------------ plumbing

    def _finished(self, r: int) -> bool:
        rk = self.ranks[r]
        return rk.uh.pc >= len(self.programs[r]) and rk.uh.phase == WrapperPhase.NONE

    @property
    def all_finished(self) -> bool:
        return all(self._finished(r) for r in range(self.n))

    @property
    def complete(self) -> bool:
        return self.all_finished and self.coord.phase in ("idle", "done") and not self.ckpt_at

    def memories(self) -> list[dict[str, bytes]]:
        return [r.uh.memory for r in self.ranks]

    def digest(self) -> str:
        return memory_digest(self.memories())

    def _post(self, src: int, dst: int, kind: str, msg) -> int:
        ev_kind = "deliver-data" if kind == DATA else "deliver-control"
        eid = self.schedule_event(actor_name(dst), ev_kind, (src, dst, kind))
        if kind == DATA:
            msg = msg._replace(eid=eid)
        self.channels.setdefault((src, dst, kind), []).append((eid, msg))
        return eid

    def _ctl(self, src: int, dst: int, msg: co.ControlMessage, effects: list) -> None:
        self._post(src, dst, CTL, msg)
        effects.append({"kind": "ctl-send", "src": src, "dst": dst, **msg.detail()})

    def _violation(self, name: str, detail: str) -> None:
        self.violations.append({"invariant": name, "step": self.steps, "detail": detail})

    # ------------------------------------------------------------------ enabling

    def is_enabled(self, ev: Event) -> bool:
        k = ev.kind
        if k == "app":
            return self._app_enabled(ev.data)
        if k in ("deliver-data", "deliver-control"):
            return self.channels[ev.data][0][0] == ev.eid
        if k == "drain":
            rk = self.ranks[ev.data]
            return dr.drain_ready(rk.uh, self.lh, rk.helper.deficits)
        if k == "begin-checkpoint":
            return self.coord.phase in ("idle", "done")
        return True

    def _app_enabled(self, r: int) -> bool:
        rk = self.ranks[r]
        if rk.helper.quiesced:
            return False
        if rk.active is not None:
            return eng.collective_ready(self.lh, r, rk.active)
        if rk.uh.phase == WrapperPhase.PHASE1 and rk.at_gate:
            return co.may_enter_phase2(rk.helper, "no-phase2-gate" not in self.mutants)
        op = self.programs[r][rk.uh.pc]
        if isinstance(op, Coll):
            return co.may_enter_wrapper(rk.helper)
        if isinstance(op, Recv):
            vid = self._vid(rk, op.comm)
            return uhm.recv_ready(rk.uh, self.lh, op.src, op.tag, vid)
        return True

    def forced_event(self) -> int | None:
        if self.ckpt_at and self.ckpt_at[0] <= self.steps and self.coord.phase in ("idle", "done"):
            self.ckpt_at.pop(0)
            return self.schedule_event("coordinator", "begin-checkpoint")
        return None

    # ------------------------------------------------------------------ execution

    def execute(self, ev: Event) -> dict:
        effects: list[dict] = []
        detail: dict = {"effects": effects}
        if ev.kind == "app":
            self._exec_app(ev.data, effects)
        elif ev.kind == "deliver-data":
            _, env = self.channels[ev.data].pop(0)
            eng.deliver(self.lh, env)
            effects.append({"kind": "p2p-deliver", "eid": env.eid, "src": env.src, "dst": env.dst,
                            "ctx": env.ctx, "tag": env.tag, "seq": env.seq})
        elif ev.kind == "deliver-control":
            src, dst, _ = ev.data
            _, msg = self.channels[ev.data].pop(0)
            effects.append({"kind": "ctl-deliver", "src": src, "dst": dst, **msg.detail()})
            if dst == COORD:
                self._coord_receive(src, msg, effects)
            else:
                self._helper_receive(dst, src, msg, effects)
        elif ev.kind == "drain":
            self._exec_drain(ev.data, effects)
        elif ev.kind == "begin-checkpoint":
            if ev.eid == self.inject_eid:
                self.inject_eid = None
            self.intend_delivered = 0
            for dst, msg in co.begin_checkpoint(self.coord):
                self._ctl(COORD, dst, msg, effects)
            detail["epoch"] = self.coord.epoch
        return detail

    def _vid(self, rk: Rank, name: str) -> int:
        if name == "world":
            return uhm.WORLD
        try:
            return struct.unpack("<Q", rk.uh.memory["h:" + name])[0]
        except KeyError:
            raise uhm.UnboundHandle(f"rank {rk.uh.rank}: no handle named {name!r}") from None

    def _exec_app(self, r: int, effects: list) -> None:
        rk = self.ranks[r]
        uh = rk.uh
        if rk.active is not None:
            env, fault = eng.collective_step(self.lh, r, rk.active)
            if env is not None:
                self._send_data(env, effects, coll=True)
            if fault:
                self.faults.append({"step": self.steps, "rank": r, "fault": fault})
                effects.append({"kind": "fault", "fault": fault})
            if rk.active.done:
                self._exit_collective(r, effects)
        elif uh.phase == WrapperPhase.PHASE1 and rk.at_gate:
            rk.at_gate = False
            if self.window_open:
                entry = {"step": self.steps, "rank": r, "free_pass": rk.helper.free_pass}
                self.window_entries.append(entry)
            rk.active = uhm.enter_phase2(uh, self.lh, rk.contribution)
            effects.append(self._coll_effect("enter-collective", r, 2))
            if rk.active.done:
                self._exit_collective(r, effects)
        else:
            op = self.programs[r][uh.pc]
            self._exec_op(r, op, effects)
        if self._finished(r):
            rk.app_eid = None
        else:
            rk.app_eid = self.schedule_event(actor_name(r), "app", r)

    def _coll_effect(self, kind: str, r: int, phase: int) -> dict:
        rk = self.ranks[r]
        p = rk.uh.pending
        return {"kind": kind, "rank": r, "phase": phase, "op": "barrier" if phase == 1 else p.op,
                "vid": p.vid, "gid": rk.uh.handles[p.vid].gid, "instance": rk.active.instance,
                "comm": int(rk.active.spec.comm)}

    def _exit_collective(self, r: int, effects: list) -> None:
        rk = self.ranks[r]
        uh = rk.uh
        if rk.active.trivial:
            effects.append(self._coll_effect("exit-collective", r, 1))
            rk.active = None
            rk.at_gate = True
            h = rk.helper
            if (h.intend and not h.free_pass and "no-phase2-gate" not in self.mutants
                    and "strict-gate" not in self.mutants):
                self._ctl(r, COORD, co.ControlMessage(co.GATE_NOTICE, h.epoch, h.round), effects)
            return
        effects.append(self._coll_effect("exit-collective", r, 2))
        op = self.programs[r][uh.pc]
        uh.memory[op.dst_key] = rk.active.output
        gid = uh.handles[uh.pending.vid].gid
        uhm.finish_wrapper(uh)
        rk.active = None
        rk.contribution = b""
        rk.helper.free_pass = False
        uh.pc += 1
        rep = co.phase2_exit_report(rk.helper)
        if rep is not None:
            self._send_report(r, rep._replace(body=(("exited", gid),)), effects)

    def _send_data(self, env: eng.Envelope, effects: list, coll: bool = False) -> None:
        eid = self._post(env.src, env.dst, DATA, env)
        effects.append({"kind": "p2p-send", "eid": eid, "src": env.src, "dst": env.dst,
                        "ctx": env.ctx, "comm": env.comm, "tag": env.tag, "seq": env.seq,
                        "bytes": len(env.payload)})

    def _exec_op(self, r: int, op, effects: list) -> None:
        rk = self.ranks[r]
        uh = rk.uh
        if isinstance(op, Compute):
            run_compute(uh.memory, op)
            uh.pc += 1
        elif isinstance(op, Send):
            vid = self._vid(rk, op.comm)
            env = uhm.v_send(uh, self.lh, op.dst, op.tag, vid, uh.memory[op.src_key])
            self._send_data(env, effects)
            uh.pc += 1
        elif isinstance(op, Recv):
            vid = self._vid(rk, op.comm)
            got = uhm.v_recv(uh, self.lh, op.src, op.tag, vid)
            payload, eid, buffered = got
            uh.memory[op.dst_key] = payload
            effects.append({"kind": "p2p-recv", "rank": r, "eid": eid, "buffered": buffered,
                            "vid": vid, "tag": op.tag})
            uh.pc += 1
        elif isinstance(op, Coll):
            vid = self._vid(rk, op.comm)
            h = uh.handle(vid)
            contribution = uh.memory.get(op.src_key, b"")
            p = PendingCollective(op.op, vid, op.root, op.reduce, len(contribution))
            rk.contribution = contribution
            rk.active = uhm.begin_wrapper(uh, self.lh, p)
            effects.append(self._coll_effect("enter-collective", r, 1))
            effects[-1]["members"] = list(h.members)
            if rk.active.done:
                self._exit_collective(r, effects)
        elif isinstance(op, (CommCreate, CommDup, GroupIncl, CommCreateGroup)):
            parent = self._vid(rk, op.parent)
            if isinstance(op, CommCreate):
                vid = uhm.v_comm_create(uh, self.lh, parent, op.members)
            elif isinstance(op, CommDup):
                vid = uhm.v_comm_dup(uh, self.lh, parent)
            elif isinstance(op, GroupIncl):
                vid = uhm.v_group_incl(uh, self.lh, parent, op.indices)
            else:
                vid = uhm.v_comm_create_group(uh, self.lh, parent, self._vid(rk, op.group))
            uh.memory["h:" + op.name] = _vid_bytes(vid)
            effects.append({"kind": "handle-create", "rank": r, "vid": vid,
                            "call": type(op).__name__})
            uh.pc += 1
        else:
            raise TypeError(f"unknown op {op!r}")

    # ------------------------------------------------------------------ helpers

    def _send_report(self, r: int, msg: co.ControlMessage, effects: list) -> None:
        snapshot = tuple(sorted(self.ranks[r].uh.wrappers.items()))
        msg = msg._replace(body=msg.body + snapshot)
        self._label_lemma2(effects)
        self._ctl(r, COORD, msg, effects)

    def _helper_receive(self, r: int, src: int, msg: co.ControlMessage, effects: list) -> None:
        rk = self.ranks[r]
        h = rk.helper
        if msg.kind in (co.INTEND, co.EXTRA):
            if msg.kind == co.INTEND:
                self.intend_delivered += 1
                if self.intend_delivered == self.n:
                    self.window_open = True
            rep = co.on_rank_control(h, rk.uh.phase, rk.at_gate, msg)
            if rep is not None:
                self._send_report(r, rep, effects)
        elif msg.kind == co.FREE_PASS:
            if rk.uh.phase == WrapperPhase.PHASE1 and rk.at_gate and h.intend:
                h.free_pass = True
        elif msg.kind == co.DO_CKPT:
            if rk.uh.phase == WrapperPhase.PHASE2 or rk.active is not None and not rk.active.trivial:
                self._violation("theorem1", f"rank {r} received do-ckpt inside a collective")
            if h.deferred:
                self._violation("theorem1", f"rank {r} received do-ckpt with a report outstanding")
            h.quiesced = True
            for peer in range(self.n):
                if peer != r:
                    body = dr.bookmark(rk.uh, peer)
                    self._ctl(r, peer, co.ControlMessage(co.BOOKMARK, msg.epoch, msg.round, body=body),
                              effects)
            self._maybe_schedule_drain(r)
        elif msg.kind == co.BOOKMARK:
            h.bookmarks[src] = msg.body
            self._maybe_schedule_drain(r)
        elif msg.kind == co.RESUME:
            co.on_resume(h)
        else:
            raise co.ProtocolError(f"rank {r} got unexpected {msg.kind}")

    def _maybe_schedule_drain(self, r: int) -> None:
        rk = self.ranks[r]
        h = rk.helper
        if h.quiesced and h.deficits is None and len(h.bookmarks) == self.n - 1:
            try:
                h.deficits = dr.deficits(rk.uh, h.bookmarks)
            except dr.LostMessage as exc:
                self._violation("drain-conservation", str(exc))
                h.deficits = {}
            rk.drain_eid = self.schedule_event(actor_name(r), "drain", r)

    def _exec_drain(self, r: int, effects: list) -> None:
        rk = self.ranks[r]
        h = rk.helper
        rk.drain_eid = None
        drop = 1 if "drop-drained" in self.mutants and any(h.deficits.values()) else 0
        new = dr.drain_messages(rk.uh, self.lh, h.deficits, drop=drop)
        for e in dr.conservation_errors(rk.uh, h.bookmarks):
            self._violation("drain-conservation", f"rank {r}: {e}")
        leftover = [e for e in self.lh.inbox[r] if e.ctx == eng.P2P]
        for (s, d, kind), q in self.channels.items():
            if d == r and kind == DATA:
                leftover += [m for _, m in q if m.ctx == eng.P2P]
        if leftover:
            self._violation("post-drain-quiescence",
                            f"rank {r}: {len(leftover)} p2p envelopes left toward it at image time")
        if rk.uh.phase == WrapperPhase.PHASE2:
            self._violation("theorem1", f"rank {r} imaged inside a collective")
        image = encode_image(rk.uh)
        epoch = self.coord.epoch
        self.images.setdefault(epoch, {})[r] = image
        self.image_steps[epoch] = self.steps
        h.image_written = True
        effects.append({"kind": "image-write", "rank": r, "epoch": epoch, "bytes": len(image),
                        "drained": len(new), "drained_eids": [d.eid for d in new],
                        "buffer_eids": [d.eid for d in rk.uh.drained],
                        "phase": int(rk.uh.phase)})
        self._ctl(r, COORD, co.ControlMessage(co.CKPT_DONE, epoch, self.coord.round), effects)

    def _coord_receive(self, src: int, msg: co.ControlMessage, effects: list) -> None:
        coord = self.coord
        if msg.kind == co.REPORT and msg.epoch == coord.epoch and coord.phase == "collecting":
            self._check_lemma1(src, msg)
        out, note = co.on_coordinator_message(coord, src, msg)
        if note:
            effects.append({"kind": "coord-note", "note": note, "round": coord.round})
        for dst, m in out:
            if m.kind == co.DO_CKPT:
                self.window_open = False
            self._ctl(COORD, dst, m, effects)

    # ------------------------------------------------------------------ monitors

    def _check_lemma1(self, src: int, msg: co.ControlMessage) -> None:
        """A barrier exit seen in round r implies every member entered it by round r+1."""
        wrappers = {a: b for a, b in msg.body if a != "exited"}
        for (rnd, gid, k, mem) in self.obligations:
            if rnd == msg.round and src in mem and wrappers.get(gid, 0) < k:
                self._violation("lemma1", f"rank {src} reports {wrappers.get(gid, 0)} entries of "
                                f"{gid} in round {rnd}, expected >= {k}")
        if msg.state == co.EXIT_PHASE_2:
            gid = next(b for a, b in msg.body if a == "exited")
            k = wrappers[gid]
            mem = next(rk.uh.handles[v].members for rk in self.ranks
                       for v in rk.uh.handles if rk.uh.handles[v].gid == gid)
            self.obligations = self.obligations + ((msg.round + 1, gid, k, mem),)

    def _label_lemma2(self, effects: list) -> None:
        """Classify every wrapper instance in progress into one of four cases."""
        members: dict[str, tuple[int, ...]] = {}
        for rk in self.ranks:
            for h in rk.uh.handles.values():
                if h.kind == "communicator":
                    members.setdefault(h.gid, h.members)
        labels = []
        for gid, mem in sorted(members.items()):
            started = {}
            cur = {}
            for r in mem:
                uh = self.ranks[r].uh
                started[r] = uh.wrappers.get(gid, 0)
                if uh.pending is not None and uh.handles[uh.pending.vid].gid == gid:
                    cur[r] = "P2" if uh.phase == WrapperPhase.PHASE2 else "P1"
            ks = {s for s in started.values() if s >= 1} or {1}
            for k in sorted(ks):
                st = []
                for r in mem:
                    s = started[r]
                    st.append("N" if s < k else "X" if s > k else cur.get(r, "X"))
                lab = lemma2_case(st)
                if lab is None:
                    self._violation("lemma2-unlabeled", f"{gid}#{k}: statuses {st}")
                else:
                    self.labels.add(lab)
                    labels.append((gid, k, lab))
        effects.append({"kind": "lemma2-labels", "labels": [list(x) for x in labels]})


def lemma2_case(statuses: list[str]) -> str | None:
    """Case a-d for one wrapper instance given each member's status.

    Status letters: N not entered, P1 in the trivial barrier or held after
    it, P2 inside the collective, X finished it.
    """
    s = set(statuses)
    if "P2" in s and s <= {"P2", "X"}:
        return "a"
    if "P2" in s and "X" not in s and "N" not in s:
        return "b"
    if "P1" in s and "X" not in s and "P2" not in s:
        return "c"
    if s == {"N"} or s == {"X"}:
        return "d"
    return None


def run(sim: Simulation, sched: Schedule, raise_on_deadlock: bool = True) -> Simulation:
    """Step until quiescent.  Raises :class:`Deadlock` on an unfinished quiescent state."""
    while True:
        if sim.steps >= sim.max_steps:
            raise RuntimeError(f"step bound {sim.max_steps} exceeded")
        res = sim.step(sched)
        if isinstance(res, Quiescent):
            break
    if sim.ckpt_at:
        raise ValueError(f"checkpoint trigger(s) {sim.ckpt_at} beyond run length {sim.steps}")
    if not sim.complete and raise_on_deadlock:
        stuck = [r for r in range(sim.n) if not sim._finished(r)]
        raise Deadlock(f"quiescent with unfinished ranks {stuck}, coordinator {sim.coord.phase}", sim)
    return sim


ANY_SOURCE = ANY
