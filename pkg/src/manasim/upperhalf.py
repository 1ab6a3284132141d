"""Upper half: the application-facing API and everything a checkpoint keeps.

Applications only ever hold virtual handles (vids).  Calls that create
communicators or groups are recorded so a fresh engine can be brought to the
same state by replaying them; the vids survive, the real ids do not.
"""

from __future__ import annotations

from enum import IntEnum
from typing import NamedTuple

from . import engine as eng
from .engine import ANY, CollectiveSpec, LowerHalf, RealCommId

WORLD = 0


class CorruptImage(ValueError):
    pass


class UnboundHandle(KeyError):
    pass


class WrapperPhase(IntEnum):
    NONE = 0
    PHASE1 = 1
    PHASE2 = 2


class VirtualHandle(NamedTuple):
    vid: int
    kind: str  # "communicator" | "group"
    gid: str  # creation lineage, identical on every member and across restarts
    members: tuple[int, ...]


class ReplayEntry(NamedTuple):
    call: str  # "comm-create" | "group-incl" | "comm-dup"
    args: tuple
    vid: int


class DrainedEnvelope(NamedTuple):
    eid: int
    src: int
    vid: int
    tag: int
    seq: int
    payload: bytes


class PendingCollective(NamedTuple):
    op: str
    vid: int
    root: int | None
    reduce: str | None
    nbytes: int


class UpperHalfState:
    """Per-rank upper-half state.

    ``bindings`` maps vid to the engine's real id.  It is lower-half knowledge
    cached here for speed and is never serialized.
    """

    __slots__ = ("rank", "world_size", "pc", "memory", "handles", "next_vid", "replay_log",
                 "drained", "sent", "received", "phase", "pending", "wrappers", "bindings")

    def __init__(self, rank: int, world_size: int) -> None:
        self.rank = rank
        self.world_size = world_size
        self.pc = 0
        self.memory: dict[str, bytes] = {}
        self.handles: dict[int, VirtualHandle] = {
            WORLD: VirtualHandle(WORLD, "communicator", "w", tuple(range(world_size)))
        }
        self.next_vid = 1
        self.replay_log: list[ReplayEntry] = []
        self.drained: list[DrainedEnvelope] = []
        self.sent: dict[tuple[int, str, int], int] = {}
        self.received: dict[tuple[int, str, int], int] = {}
        self.phase = WrapperPhase.NONE
        self.pending: PendingCollective | None = None
        self.wrappers: dict[str, int] = {}
        self.bindings: dict[int, RealCommId] = {}

    def clone(self) -> UpperHalfState:
        uh = UpperHalfState.__new__(UpperHalfState)
        uh.rank = self.rank
        uh.world_size = self.world_size
        uh.pc = self.pc
        uh.memory = dict(self.memory)
        uh.handles = dict(self.handles)
        uh.next_vid = self.next_vid
        uh.replay_log = list(self.replay_log)
        uh.drained = list(self.drained)
        uh.sent = dict(self.sent)
        uh.received = dict(self.received)
        uh.phase = self.phase
        uh.pending = self.pending
        uh.wrappers = dict(self.wrappers)
        uh.bindings = dict(self.bindings)
        return uh

    def key(self) -> tuple:
        return (
            self.pc,
            tuple(sorted(self.memory.items())),
            self.next_vid,
            tuple((d.src, d.vid, d.tag, d.seq, d.payload) for d in self.drained),
            tuple(sorted(self.sent.items())),
            tuple(sorted(self.received.items())),
            int(self.phase),
            self.pending,
            tuple(sorted(self.wrappers.items())),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, UpperHalfState):
            return NotImplemented
        return all(getattr(self, s) == getattr(other, s)
                   for s in self.__slots__ if s != "bindings")

    def __repr__(self) -> str:
        return f"UpperHalfState(rank={self.rank}, pc={self.pc}, phase={self.phase.name})"

    def handle(self, vid: int) -> VirtualHandle:
        try:
            return self.handles[vid]
        except KeyError:
            raise UnboundHandle(f"rank {self.rank}: vid {vid} not bound") from None


def new_upper_half(rank: int, lh: LowerHalf) -> UpperHalfState:
    uh = UpperHalfState(rank, lh.world_size)
    uh.bindings[WORLD] = lh.world
    return uh


def resolve(uh: UpperHalfState, vid: int) -> RealCommId:
    uh.handle(vid)
    return uh.bindings[vid]


def _allocate(uh: UpperHalfState, kind: str, gid: str, mem: tuple[int, ...], real: RealCommId) -> int:
    vid = uh.next_vid
    uh.next_vid += 1
    uh.handles[vid] = VirtualHandle(vid, kind, gid, mem)
    uh.bindings[vid] = real
    return vid


def _lineage(uh: UpperHalfState, call: str, parent: VirtualHandle, mem: tuple[int, ...]) -> str:
    base = f"{parent.gid}/{call}:{','.join(map(str, mem))}"
    k = sum(1 for h in uh.handles.values() if h.gid.rsplit("#", 1)[0] == base)
    return f"{base}#{k}"


def _do_create(uh: UpperHalfState, lh: LowerHalf, call: str, args: tuple) -> int:
    parent_vid = args[0]
    parent = uh.handle(parent_vid)
    if call == "comm-create":
        mem = tuple(args[1])
        if parent.kind != "communicator":
            raise eng.InvalidGroup(f"vid {parent_vid} is not a communicator")
        if uh.rank not in mem:
            raise eng.InvalidGroup(f"rank {uh.rank} creating a communicator it is not a member of")
        gid = _lineage(uh, "c", parent, mem)
        real = eng.comm_create(lh, uh.bindings[parent_vid], mem, key=gid)
        return _allocate(uh, "communicator", gid, mem, real)
    if call == "comm-dup":
        if parent.kind != "communicator":
            raise eng.InvalidGroup(f"vid {parent_vid} is not a communicator")
        gid = _lineage(uh, "d", parent, parent.members)
        real = eng.comm_create(lh, uh.bindings[parent_vid], parent.members, key=gid)
        return _allocate(uh, "communicator", gid, parent.members, real)
    if call == "group-incl":
        idx = tuple(args[1])
        if any(not 0 <= i < len(parent.members) for i in idx) or not idx:
            raise eng.InvalidGroup(f"group indices {list(idx)} outside {len(parent.members)} members")
        mem = tuple(parent.members[i] for i in idx)
        gid = _lineage(uh, "g", parent, mem)
        # groups are local objects; they get engine ids from the same table
        real = eng.comm_create(lh, uh.bindings[parent_vid], mem, key=(uh.rank, gid))
        return _allocate(uh, "group", gid, mem, real)
    raise CorruptImage(f"unknown replay call {call!r}")


def _record(uh: UpperHalfState, lh: LowerHalf, call: str, args: tuple) -> int:
    vid = _do_create(uh, lh, call, args)
    uh.replay_log.append(ReplayEntry(call, args, vid))
    return vid


def v_comm_create(uh: UpperHalfState, lh: LowerHalf, parent: int, members) -> int:
    """Create a communicator of world ranks ``members`` under ``parent``."""
    return _record(uh, lh, "comm-create", (parent, tuple(members)))


def v_comm_create_group(uh: UpperHalfState, lh: LowerHalf, parent: int, group: int) -> int:
    g = uh.handle(group)
    if g.kind != "group":
        raise eng.InvalidGroup(f"vid {group} is not a group")
    return v_comm_create(uh, lh, parent, g.members)


def v_comm_dup(uh: UpperHalfState, lh: LowerHalf, vid: int) -> int:
    return _record(uh, lh, "comm-dup", (vid,))


def v_group_incl(uh: UpperHalfState, lh: LowerHalf, vid: int, indices) -> int:
    return _record(uh, lh, "group-incl", (vid, tuple(indices)))


def v_send(uh: UpperHalfState, lh: LowerHalf, dst: int, tag: int, vid: int, payload: bytes) -> eng.Envelope:
    """Build the outgoing envelope and count it.  ``dst`` is a comm index."""
    h = uh.handle(vid)
    env = eng.isend(lh, uh.rank, dst, tag, uh.bindings[vid], payload)
    k = (env.dst, h.gid, tag)
    uh.sent[k] = uh.sent.get(k, 0) + 1
    return env


def _src_world(h: VirtualHandle, src: int) -> int:
    if src == ANY:
        return ANY
    if not 0 <= src < len(h.members):
        raise eng.InvalidRank(f"source index {src} outside communicator of size {len(h.members)}")
    return h.members[src]


def _buffer_match(uh: UpperHalfState, src_world: int, tag: int, vid: int) -> int | None:
    for i, d in enumerate(uh.drained):
        if d.vid == vid and (src_world == ANY or d.src == src_world) and (tag == ANY or d.tag == tag):
            return i
    return None


def recv_ready(uh: UpperHalfState, lh: LowerHalf, src: int, tag: int, vid: int) -> bool:
    h = uh.handle(vid)
    s = _src_world(h, src)
    if _buffer_match(uh, s, tag, vid) is not None:
        return True
    return eng.match(lh, uh.rank, s, tag, uh.bindings[vid]) is not None


def v_recv(uh: UpperHalfState, lh: LowerHalf, src: int, tag: int, vid: int):
    """Receive one message.  Drained messages are consumed before the engine.

    Returns ``(payload, envelope_id, from_buffer)`` or None when it would block.
    """
    h = uh.handle(vid)
    s = _src_world(h, src)
    i = _buffer_match(uh, s, tag, vid)
    if i is not None:
        d = uh.drained.pop(i)
        src_w, t, payload, eid, buffered = d.src, d.tag, d.payload, d.eid, True
    else:
        env = eng.recv(lh, uh.rank, s, tag, uh.bindings[vid])
        if env is None:
            return None
        src_w, t, payload, eid, buffered = env.src, env.tag, env.payload, env.eid, False
    k = (src_w, h.gid, t)
    uh.received[k] = uh.received.get(k, 0) + 1
    return payload, eid, buffered


def to_engine_spec(uh: UpperHalfState, p: PendingCollective) -> CollectiveSpec:
    return CollectiveSpec(p.op, resolve(uh, p.vid), p.root, p.reduce, p.nbytes)


def begin_wrapper(uh: UpperHalfState, lh: LowerHalf, p: PendingCollective):
    """Phase 1: enter the trivial barrier on the collective's communicator."""
    if uh.phase != WrapperPhase.NONE:
        raise RuntimeError(f"rank {uh.rank}: wrapper re-entered in {uh.phase.name}")
    real = resolve(uh, p.vid)
    uh.phase = WrapperPhase.PHASE1
    uh.pending = p
    gid = uh.handles[p.vid].gid
    uh.wrappers[gid] = uh.wrappers.get(gid, 0) + 1
    return trivial_barrier(lh, uh.rank, real)


def trivial_barrier(lh: LowerHalf, rank: int, comm: int):
    """A barrier with no upper-half effect; safe to abandon and re-issue."""
    return eng.start_collective(lh, rank, CollectiveSpec("barrier", comm), b"", trivial=True)


def enter_phase2(uh: UpperHalfState, lh: LowerHalf, contribution: bytes):
    if uh.phase != WrapperPhase.PHASE1:
        raise RuntimeError(f"rank {uh.rank}: phase 2 from {uh.phase.name}")
    uh.phase = WrapperPhase.PHASE2
    return eng.start_collective(lh, uh.rank, to_engine_spec(uh, uh.pending), contribution)


def finish_wrapper(uh: UpperHalfState) -> None:
    if uh.phase != WrapperPhase.PHASE2:
        raise RuntimeError(f"rank {uh.rank}: wrapper finished from {uh.phase.name}")
    uh.phase = WrapperPhase.NONE
    uh.pending = None


def rebuild_lower_half(uh: UpperHalfState, lh: LowerHalf) -> UpperHalfState:
    """Rebind every vid against a freshly initialized engine by replay.

    A rank caught in phase 1 is rewound to the start of its wrapper so the
    trivial barrier is issued again.
    """
    if uh.world_size != lh.world_size:
        raise CorruptImage(f"image world size {uh.world_size} != engine world size {lh.world_size}")
    for h in uh.handles.values():
        if any(not 0 <= m < lh.world_size for m in h.members):
            raise CorruptImage(f"vid {h.vid} references ranks {list(h.members)} outside world "
                               f"of size {lh.world_size}")
    saved = dict(uh.handles)
    uh.handles = {WORLD: saved[WORLD]}
    uh.bindings = {WORLD: lh.world}
    uh.next_vid = 1
    for entry in uh.replay_log:
        try:
            vid = _do_create(uh, lh, entry.call, entry.args)
        except (eng.EngineError, UnboundHandle) as exc:
            raise CorruptImage(f"replay of {entry.call} failed: {exc}") from None
        if vid != entry.vid or uh.handles[vid] != saved.get(vid):
            raise CorruptImage(f"replay of {entry.call} produced vid {vid} "
                               f"{uh.handles[vid]} != recorded {saved.get(entry.vid)}")
    if uh.handles.keys() != saved.keys():
        raise CorruptImage("handle table not reproduced by replay log")
    for vid, real in uh.bindings.items():
        if lh.comms[real] != saved[vid].members:
            raise CorruptImage(f"vid {vid} rebound with different membership")
    uh.next_vid = max(saved) + 1
    if uh.phase == WrapperPhase.PHASE1:
        gid = uh.handles[uh.pending.vid].gid
        uh.wrappers[gid] -= 1
        uh.phase = WrapperPhase.NONE
        uh.pending = None
    elif uh.phase == WrapperPhase.PHASE2:
        raise CorruptImage(f"rank {uh.rank} was checkpointed inside a collective")
    return uh
