"""Application programs: flat op lists executed one op per step.

A program's continuation point is just its op index, which is what a
checkpoint image stores.  Handles are kept in memory under ``h:<name>`` so
that everything the application knows lives in the upper half.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

ANY = -1


class Compute(NamedTuple):
    fn: str
    args: tuple = ()


class Send(NamedTuple):
    dst: int
    tag: int
    comm: str
    src_key: str


class Recv(NamedTuple):
    src: int
    tag: int
    comm: str
    dst_key: str


class Coll(NamedTuple):
    op: str
    comm: str
    src_key: str
    dst_key: str
    root: int | None = None
    reduce: str | None = None


class CommCreate(NamedTuple):
    parent: str
    members: tuple
    name: str


class CommDup(NamedTuple):
    parent: str
    name: str


class GroupIncl(NamedTuple):
    parent: str
    indices: tuple
    name: str


class CommCreateGroup(NamedTuple):
    parent: str
    group: str
    name: str


Op = Compute | Send | Recv | Coll | CommCreate | CommDup | GroupIncl | CommCreateGroup


def u32(*vals: int) -> bytes:
    return struct.pack(f"<{len(vals)}I", *[v & 0xFFFFFFFF for v in vals])


def _vec(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype="<u4")


def _set(mem, key, value):
    mem[key] = bytes(value)


def _mix(mem, dst, src, salt):
    # deterministic stand-in for local computation
    v = _vec(mem[src]).astype(np.uint64)
    mem[dst] = ((v * 2654435761 + salt) % (1 << 32)).astype("<u4").tobytes()


def _add(mem, dst, a, b):
    mem[dst] = (_vec(mem[a]) + _vec(mem[b])).astype("<u4").tobytes()


def _xor(mem, dst, a, b):
    mem[dst] = (_vec(mem[a]) ^ _vec(mem[b])).astype("<u4").tobytes()


def _stencil(mem, dst, up, mid, down):
    u, m, d = (_vec(mem[k]).astype(np.uint64) for k in (up, mid, down))
    mem[dst] = ((u + 2 * m + d + np.roll(m, 1)) % (1 << 32)).astype("<u4").tobytes()


def _copy(mem, dst, src):
    mem[dst] = mem[src]


def _append(mem, dst, src):
    mem[dst] = mem.get(dst, b"") + mem[src]


def _digest_into(mem, dst, src):
    mem[dst] = hashlib.sha256(mem[src]).digest()[:8]


COMPUTE_FNS = {
    "set": _set,
    "mix": _mix,
    "add": _add,
    "xor": _xor,
    "stencil": _stencil,
    "copy": _copy,
    "append": _append,
    "digest": _digest_into,
}


def run_compute(mem: dict, op: Compute) -> None:
    COMPUTE_FNS[op.fn](mem, *op.args)


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    world_size: int
    steps: int = 4
    payload_bytes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.name not in BUILDERS:
            raise ValueError(f"unknown workload {self.name!r}; choose from {sorted(BUILDERS)}")
        if self.world_size < 1:
            raise ValueError("world size must be >= 1")
        if self.payload_bytes <= 0 or self.payload_bytes % 4:
            raise ValueError("payload bytes must be a positive multiple of 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSpec:
        return cls(**d)

    def programs(self) -> list[list[Op]]:
        return BUILDERS[self.name](self)


def _init(spec: WorkloadSpec, r: int, key: str = "x") -> Compute:
    words = spec.payload_bytes // 4
    return Compute("set", (key, u32(*[spec.seed * 7919 + r * 131 + i for i in range(words)])))


def ring_pingpong(spec: WorkloadSpec) -> list[list[Op]]:
    n = spec.world_size
    progs = []
    for r in range(n):
        p: list[Op] = [_init(spec, r)]
        for s in range(spec.steps):
            if n > 1:
                p.append(Send((r + 1) % n, s % 3, "world", "x"))
                p.append(Recv((r - 1) % n, s % 3, "world", "in"))
                p.append(Compute("add", ("x", "x", "in")))
                partner = r ^ 1
                if partner < n:
                    if r % 2 == 0:
                        p.append(Send(partner, 9, "world", "x"))
                        p.append(Recv(partner, 9, "world", "pong"))
                    else:
                        p.append(Recv(partner, 9, "world", "pong"))
                        p.append(Send(partner, 9, "world", "x"))
                    p.append(Compute("xor", ("x", "x", "pong")))
            p.append(Compute("mix", ("x", "x", s)))
        p.append(Coll("allreduce", "world", "x", "sum", reduce="sum"))
        progs.append(p)
    return progs


def iter_allreduce(spec: WorkloadSpec) -> list[list[Op]]:
    words = spec.payload_bytes // 4
    progs = []
    for r in range(spec.world_size):
        p: list[Op] = [Compute("set", ("acc", u32(*[0] * words)))]
        for s in range(spec.steps):
            p.append(Compute("set", ("x", u32(*[r + s + spec.seed] * words))))
            p.append(Coll("allreduce", "world", "x", "y", reduce="sum"))
            p.append(Compute("add", ("acc", "acc", "y")))
        progs.append(p)
    return progs


def stencil_2d(spec: WorkloadSpec) -> list[list[Op]]:
    n = spec.world_size
    progs = []
    for r in range(n):
        p: list[Op] = [_init(spec, r, "u")]
        up, down = (r - 1) % n, (r + 1) % n
        for s in range(spec.steps):
            if n > 1:
                p.append(Send(up, 1, "world", "u"))
                p.append(Send(down, 2, "world", "u"))
                p.append(Recv(down, 1, "world", "below"))
                p.append(Recv(up, 2, "world", "above"))
            else:
                p.append(Compute("copy", ("below", "u")))
                p.append(Compute("copy", ("above", "u")))
            p.append(Compute("stencil", ("u", "above", "u", "below")))
            if s % 2 == 1 or s == spec.steps - 1:
                p.append(Coll("allreduce", "world", "u", "resid", reduce="max"))
        progs.append(p)
    return progs


def comm_split_mix(spec: WorkloadSpec) -> list[list[Op]]:
    n = spec.world_size
    half = max(1, n // 2)
    lo, hi = tuple(range(half)), tuple(range(half, n))
    progs = []
    for r in range(n):
        mine = lo if r in lo else hi
        ix = mine.index(r)
        p: list[Op] = [_init(spec, r)]
        p.append(CommCreate("world", mine, "half"))
        p.append(CommDup("half", "half2"))
        p.append(GroupIncl("world", tuple(reversed(range(n))), "rev_g"))
        p.append(CommCreateGroup("world", "rev_g", "rev"))
        for s in range(spec.steps):
            p.append(Coll("bcast", "half", "x", "b", root=s % len(mine)))
            p.append(Compute("add", ("x", "x", "b")))
            if len(mine) > 1:
                p.append(Send((ix + 1) % len(mine), s, "half2", "x"))
                p.append(Recv((ix - 1) % len(mine), s, "half2", "nb"))
                p.append(Compute("xor", ("x", "x", "nb")))
            p.append(Coll("gather", "rev", "x", "g", root=0))
            p.append(Compute("set", ("a2a", bytes(spec.payload_bytes * n))))
            p.append(Compute("append", ("a2a", "x")))
            p.append(Compute("digest", ("d", "a2a")))
            p.append(Compute("set", ("blk", (r * 977 + s).to_bytes(4, "little") * n)))
            p.append(Coll("alltoall", "world", "blk", "col"))
            p.append(Compute("mix", ("x", "x", s)))
        progs.append(p)
    return progs


def random_p2p(seed: int, world_size: int = 4, messages: int = 12, tags: int = 3) -> list[list[Op]]:
    """Random point-to-point traffic around one allreduce.

    Every rank posts its sends, joins an allreduce, then receives in a
    shuffled order, so messages are often still in flight when a checkpoint
    lands.  Sends are eager, so no order of receives can deadlock.
    """
    import random

    rng = random.Random(seed)
    n = world_size
    sends: list[list[Op]] = [[] for _ in range(n)]
    recvs: list[list[Op]] = [[] for _ in range(n)]
    for i in range(messages if n > 1 else 0):
        src = rng.randrange(n)
        dst = rng.choice([d for d in range(n) if d != src])
        tag = rng.randrange(tags)
        sends[src].append(Compute("set", (f"m{i}", u32(seed, i, src))))
        sends[src].append(Send(dst, tag, "world", f"m{i}"))
        recvs[dst].append(Recv(src, tag, "world", f"r{i}"))
    progs = []
    for r in range(n):
        order = recvs[r][:]
        rng.shuffle(order)
        # destination keys follow receive order
        order = [op._replace(dst_key=f"r{j}") for j, op in enumerate(order)]
        split = rng.randrange(len(order) + 1)
        p: list[Op] = [Compute("set", ("x", u32(r + 1)))] + sends[r]
        p += order[:split]
        p.append(Coll("allreduce", "world", "x", "sum", reduce="sum"))
        p += order[split:]
        p.append(Compute("set", ("done", u32(1))))
        progs.append(p)
    return progs


BUILDERS = {
    "ring-pingpong": ring_pingpong,
    "iter-allreduce": iter_allreduce,
    "stencil-2d": stencil_2d,
    "comm-split-mix": comm_split_mix,
}


def memory_digest(memories: list[dict[str, bytes]]) -> str:
    """SHA-256 over rank-ordered, key-sorted application memory."""
    h = hashlib.sha256()
    for r, mem in enumerate(memories):
        h.update(struct.pack("<II", r, len(mem)))
        for k in sorted(mem):
            kb = k.encode()
            h.update(struct.pack("<I", len(kb)) + kb + struct.pack("<I", len(mem[k])) + mem[k])
    return h.hexdigest()
