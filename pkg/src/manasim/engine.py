"""Lower half: a minimal MPI-like library whose state is never checkpointed.

Two engines are registered.  They agree on every result an application can
observe and differ only in the message pattern of their collectives:
``linear`` routes every collective through a star centred on the root,
``binomial`` through a binomial tree.  Every collective is a fan-in toward
the root followed by a fan-out release, so no member leaves a collective
before every member has entered it.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np


class EngineError(Exception):
    pass


class InvalidConfig(EngineError, ValueError):
    pass


class InvalidRank(EngineError, ValueError):
    pass


class InvalidGroup(EngineError, ValueError):
    pass


class RealCommId(int):
    """Engine-local communicator id.  Must never reach a checkpoint image."""

    def __repr__(self) -> str:
        return f"RealCommId({int(self)})"


class EngineId(NamedTuple):
    name: str
    version: int = 1


ENGINES = {
    # name: (world real id, first derived id, id stride)
    "linear": (1, 1000, 1),
    "binomial": (91, 5003, 7),
}

ANY = -1
P2P = "p2p"
COLL = "coll"

OPS = ("barrier", "bcast", "gather", "allreduce", "alltoall")
REDUCE_FNS = ("sum", "max")


def engine_id(name: str, version: int = 1) -> EngineId:
    if name not in ENGINES:
        raise InvalidConfig(f"unknown engine {name!r}; registered: {sorted(ENGINES)}")
    return EngineId(name, version)


class Envelope(NamedTuple):
    eid: int
    src: int
    dst: int
    ctx: str
    comm: int
    tag: int
    seq: int
    payload: bytes


class CollectiveSpec(NamedTuple):
    op: str
    comm: int
    root: int | None = None
    reduce: str | None = None
    nbytes: int = 0


class LowerHalf:
    """All engine state for one simulated world."""

    __slots__ = ("engine", "world_size", "comms", "create_keys", "n_created", "seq", "inbox",
                 "coll_count")

    def __init__(self, engine: EngineId, world_size: int) -> None:
        self.engine = engine
        self.world_size = world_size
        world_id, _, _ = ENGINES[engine.name]
        self.comms: dict[int, tuple[int, ...]] = {RealCommId(world_id): tuple(range(world_size))}
        self.create_keys: dict[tuple, RealCommId] = {}
        self.n_created = 0
        self.seq: dict[tuple, int] = {}
        self.inbox: list[list[Envelope]] = [[] for _ in range(world_size)]
        self.coll_count: dict[tuple[int, int], int] = {}

    @property
    def world(self) -> RealCommId:
        return RealCommId(ENGINES[self.engine.name][0])

    def clone(self) -> LowerHalf:
        lh = LowerHalf.__new__(LowerHalf)
        lh.engine = self.engine
        lh.world_size = self.world_size
        lh.comms = dict(self.comms)
        lh.create_keys = dict(self.create_keys)
        lh.n_created = self.n_created
        lh.seq = dict(self.seq)
        lh.inbox = [list(b) for b in self.inbox]
        lh.coll_count = dict(self.coll_count)
        return lh

    def key(self) -> tuple:
        return (
            tuple(sorted(self.create_keys.items())),
            tuple(sorted(self.seq.items())),
            tuple(tuple(e[1:] for e in b) for b in self.inbox),
            tuple(sorted(self.coll_count.items())),
        )


def engine_init(engine: EngineId, world_size: int) -> LowerHalf:
    if world_size < 1:
        raise InvalidConfig(f"world size must be >= 1, got {world_size}")
    if engine.name not in ENGINES:
        raise InvalidConfig(f"unknown engine {engine.name!r}")
    return LowerHalf(engine, world_size)


def members(state: LowerHalf, comm: int) -> tuple[int, ...]:
    try:
        return state.comms[comm]
    except KeyError:
        raise InvalidGroup(f"unknown communicator {comm!r}") from None


def comm_create(state: LowerHalf, parent: int, new_members, key=None) -> RealCommId:
    """Create a communicator over ``new_members`` (world ranks, order kept).

    Members of one creation pass the same ``key`` and get the same id back.
    """
    parent_members = members(state, parent)
    new_members = tuple(new_members)
    if not new_members or not set(new_members) <= set(parent_members):
        raise InvalidGroup(f"members {list(new_members)} not a nonempty subset of {list(parent_members)}")
    if len(set(new_members)) != len(new_members):
        raise InvalidGroup(f"duplicate members in {list(new_members)}")
    if key is not None and key in state.create_keys:
        real = state.create_keys[key]
        if state.comms[real] != new_members:
            raise InvalidGroup(f"creation {key!r} already bound to different membership")
        return real
    _, base, stride = ENGINES[state.engine.name]
    real = RealCommId(base + stride * state.n_created)
    state.n_created += 1
    state.comms[real] = new_members
    if key is not None:
        state.create_keys[key] = real
    return real


def comm_index(state: LowerHalf, comm: int, world_rank: int) -> int:
    try:
        return members(state, comm).index(world_rank)
    except ValueError:
        raise InvalidRank(f"rank {world_rank} not in communicator {comm!r}") from None


def isend(state: LowerHalf, src: int, dst: int, tag: int, comm: int, payload: bytes,
          ctx: str = P2P) -> Envelope:
    """Build the envelope for ``src -> members[dst]``.  ``dst`` is a comm index.

    The caller owns delivery and assigns the envelope id.
    """
    mem = members(state, comm)
    if not 0 <= dst < len(mem):
        raise InvalidRank(f"destination index {dst} outside communicator of size {len(mem)}")
    if src not in mem:
        raise InvalidRank(f"sender {src} not in communicator {comm!r}")
    dst_world = mem[dst]
    k = (src, dst_world, int(comm), ctx, tag)
    seq = state.seq.get(k, 0)
    state.seq[k] = seq + 1
    return Envelope(-1, src, dst_world, ctx, int(comm), tag, seq, bytes(payload))


def deliver(state: LowerHalf, env: Envelope) -> None:
    state.inbox[env.dst].append(env)


def match(state: LowerHalf, rank: int, src: int, tag: int, comm: int, ctx: str = P2P) -> int | None:
    """Index in ``rank``'s inbox of the earliest matching envelope.

    ``src`` is a world rank or ANY.  Per-channel FIFO delivery makes inbox
    order agree with sequence order for any fixed sender.
    """
    for i, e in enumerate(state.inbox[rank]):
        if (e.comm == comm and e.ctx == ctx and (src == ANY or e.src == src)
                and (tag == ANY or e.tag == tag)):
            return i
    return None


def recv(state: LowerHalf, rank: int, src: int, tag: int, comm: int, ctx: str = P2P) -> Envelope | None:
    """Consume and return the matching envelope, or None when the call would block."""
    i = match(state, rank, src, tag, comm, ctx)
    if i is None:
        return None
    return state.inbox[rank].pop(i)


# ---------------------------------------------------------------------------
# collectives


def tree(kind: str, n: int, rel: int) -> tuple[int | None, list[int]]:
    """(parent, children) of relative rank ``rel`` in an ``n``-member tree rooted at 0."""
    if kind == "linear":
        if rel == 0:
            return None, list(range(1, n))
        return 0, []
    children = []
    if rel == 0:
        mask = 1
        while mask < n:
            children.append(mask)
            mask <<= 1
        return None, children
    low = rel & -rel
    mask = 1
    while mask < low:
        if rel + mask < n:
            children.append(rel + mask)
        mask <<= 1
    return rel - low, children


def plan(kind: str, n: int, index: int, root: int) -> tuple[tuple[str, int], ...]:
    """Micro-steps for one member: recv-up, send-up, recv-down, send-down."""
    rel = (index - root) % n
    parent, children = tree(kind, n, rel)
    to_idx = lambda r: (r + root) % n  # noqa: E731
    steps = [("ru", to_idx(c)) for c in reversed(children)]
    if parent is not None:
        steps.append(("su", to_idx(parent)))
        steps.append(("rd", to_idx(parent)))
    steps += [("sd", to_idx(c)) for c in children]
    return tuple(steps)


_OPCODE = {op: i for i, op in enumerate(OPS)}
_REDCODE = {None: 0, "sum": 1, "max": 2}
_HDR = struct.Struct("<BHBI")


def _header(spec: CollectiveSpec) -> bytes:
    return _HDR.pack(_OPCODE[spec.op], spec.root or 0, _REDCODE[spec.reduce], spec.nbytes)


def encode_blocks(blocks: dict[int, bytes]) -> bytes:
    out = bytearray()
    for i in sorted(blocks):
        out += struct.pack("<II", i, len(blocks[i])) + blocks[i]
    return bytes(out)


def decode_blocks(buf: bytes) -> dict[int, bytes]:
    out, pos = {}, 0
    while pos < len(buf):
        i, n = struct.unpack_from("<II", buf, pos)
        pos += 8
        out[i] = buf[pos:pos + n]
        pos += n
    return out


def fold(reduce: str, a: bytes, b: bytes) -> bytes:
    if len(a) != len(b) or len(a) % 4:
        raise EngineError(f"reduce operands must be equal-length u32 vectors ({len(a)} vs {len(b)})")
    x = np.frombuffer(a, dtype="<u4")
    y = np.frombuffer(b, dtype="<u4")
    r = np.add(x, y) if reduce == "sum" else np.maximum(x, y)
    return r.astype("<u4").tobytes()


def validate_spec(spec: CollectiveSpec, comm_size: int) -> None:
    if spec.op not in OPS:
        raise EngineError(f"unknown collective {spec.op!r}")
    if spec.op in ("bcast", "gather") and not (spec.root is not None and 0 <= spec.root < comm_size):
        raise InvalidRank(f"{spec.op} root {spec.root} outside communicator of size {comm_size}")
    if spec.op == "allreduce" and spec.reduce not in REDUCE_FNS:
        raise EngineError(f"allreduce needs reduce in {REDUCE_FNS}, got {spec.reduce!r}")
    if spec.op == "alltoall" and spec.nbytes % comm_size:
        raise EngineError(f"alltoall payload {spec.nbytes} not divisible by {comm_size}")


class ActiveCollective:
    """Progress of one member through one collective invocation."""

    __slots__ = ("spec", "index", "size", "instance", "steps", "pos", "acc", "result", "output",
                 "trivial")

    def clone(self) -> ActiveCollective:
        ac = ActiveCollective.__new__(ActiveCollective)
        for s in ActiveCollective.__slots__:
            setattr(ac, s, getattr(self, s))
        return ac

    def key(self) -> tuple:
        acc = tuple(sorted(self.acc.items())) if isinstance(self.acc, dict) else self.acc
        return (self.spec, self.index, self.instance, self.pos, acc, self.result, self.output,
                self.trivial)

    @property
    def done(self) -> bool:
        return self.pos >= len(self.steps) and self.output is not None


def start_collective(state: LowerHalf, rank: int, spec: CollectiveSpec, contribution: bytes,
                     trivial: bool = False) -> ActiveCollective:
    mem = members(state, spec.comm)
    if rank not in mem:
        raise InvalidRank(f"rank {rank} not a member of communicator {spec.comm!r}")
    n = len(mem)
    validate_spec(spec, n)
    idx = mem.index(rank)
    root = spec.root if spec.root is not None else 0
    ck = (rank, int(spec.comm))
    inst = state.coll_count.get(ck, 0)
    state.coll_count[ck] = inst + 1
    ac = ActiveCollective()
    ac.spec = spec
    ac.index = idx
    ac.size = n
    ac.instance = inst
    ac.steps = plan(state.engine.name, n, idx, root)
    ac.pos = 0
    ac.trivial = trivial
    ac.result = None
    ac.output = None
    contribution = bytes(contribution)
    if spec.op == "allreduce":
        ac.acc = contribution
    elif spec.op in ("gather", "alltoall"):
        ac.acc = {idx: contribution}
    elif spec.op == "bcast" and idx == root:
        ac.acc = contribution
    else:
        ac.acc = b""
    if not ac.steps or ac.steps[0][0] == "sd":
        _finalize_root(ac)
    return ac


def _finalize_root(ac: ActiveCollective) -> None:
    op = ac.spec.op
    if op == "allreduce" or op == "bcast":
        ac.result = ac.acc
        ac.output = ac.acc
    elif op == "gather":
        ac.result = b""
        ac.output = b"".join(ac.acc[i] for i in range(ac.size))
    elif op == "alltoall":
        ac.result = encode_blocks(ac.acc)
        ac.output = _alltoall_column(ac.acc, ac.index, ac.size)
    else:
        ac.result = b""
        ac.output = b""


def _alltoall_column(blocks: dict[int, bytes], me: int, n: int) -> bytes:
    out = bytearray()
    for j in range(n):
        row = blocks[j]
        w = len(row) // n
        out += row[me * w:(me + 1) * w]
    return bytes(out)


def coll_tag(instance: int, down: bool) -> int:
    return instance * 2 + (1 if down else 0)


def collective_ready(state: LowerHalf, rank: int, ac: ActiveCollective) -> bool:
    """Whether the next micro-step can run without blocking."""
    if ac.pos >= len(ac.steps):
        return True
    kind, peer = ac.steps[ac.pos]
    if kind in ("su", "sd"):
        return True
    src = state.comms[ac.spec.comm][peer]
    return match(state, rank, src, coll_tag(ac.instance, kind == "rd"), ac.spec.comm, COLL) is not None


def collective_step(state: LowerHalf, rank: int, ac: ActiveCollective) -> tuple[Envelope | None, str | None]:
    """Run one micro-step.  Returns (outgoing envelope or None, fault or None).

    Precondition: :func:`collective_ready`.
    """
    kind, peer = ac.steps[ac.pos]
    comm = ac.spec.comm
    out = fault = None
    if kind == "ru":
        src = state.comms[comm][peer]
        env = recv(state, rank, src, coll_tag(ac.instance, False), comm, COLL)
        hdr, body = env.payload[:_HDR.size], env.payload[_HDR.size:]
        if hdr != _header(ac.spec):
            fault = f"collective-mismatch from rank {src} on comm {int(comm)}"
        elif ac.spec.op == "allreduce":
            ac.acc = fold(ac.spec.reduce, ac.acc, body)
        elif ac.spec.op in ("gather", "alltoall"):
            merged = dict(ac.acc)
            merged.update(decode_blocks(body))
            ac.acc = merged
        ac.pos += 1
        if ac.pos == len(ac.steps) or ac.steps[ac.pos][0] == "sd":
            _finalize_root(ac)
    elif kind == "su":
        if ac.spec.op == "allreduce":
            body = ac.acc
        elif ac.spec.op in ("gather", "alltoall"):
            body = encode_blocks(ac.acc)
        else:
            body = b""
        out = isend(state, rank, peer, coll_tag(ac.instance, False), comm, _header(ac.spec) + body, COLL)
        ac.pos += 1
    elif kind == "rd":
        src = state.comms[comm][peer]
        env = recv(state, rank, src, coll_tag(ac.instance, True), comm, COLL)
        ac.result = env.payload
        op = ac.spec.op
        if op in ("allreduce", "bcast"):
            ac.output = env.payload
        elif op == "alltoall":
            ac.output = _alltoall_column(decode_blocks(env.payload), ac.index, ac.size)
        else:
            ac.output = b""
        ac.pos += 1
    else:  # sd
        out = isend(state, rank, peer, coll_tag(ac.instance, True), comm, ac.result, COLL)
        ac.pos += 1
    return out, fault


def reference_result(op: str, contributions: list[bytes], root: int | None = None,
                     reduce: str | None = None) -> list[bytes]:
    """Sequential loop oracle for what each member receives."""
    n = len(contributions)
    if op == "barrier":
        return [b""] * n
    if op == "bcast":
        return [contributions[root]] * n
    if op == "gather":
        return [b"".join(contributions) if i == root else b"" for i in range(n)]
    if op == "allreduce":
        vecs = [list(struct.unpack(f"<{len(c) // 4}I", c)) for c in contributions]
        acc = vecs[0]
        for v in vecs[1:]:
            acc = [(a + b) & 0xFFFFFFFF if reduce == "sum" else max(a, b) for a, b in zip(acc, v)]
        return [struct.pack(f"<{len(acc)}I", *acc)] * n
    if op == "alltoall":
        out = []
        for i in range(n):
            parts = []
            for j in range(n):
                w = len(contributions[j]) // n
                parts.append(contributions[j][i * w:(i + 1) * w])
            out.append(b"".join(parts))
        return out
    raise EngineError(f"unknown collective {op!r}")
