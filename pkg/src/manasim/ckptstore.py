"""Checkpoint images: canonical binary encoding, image sets, restart.

Image layout (little-endian, fixed field order)::

    b"MANA-SIM" version:u8
    rank:u32 world_size:u32 pc:u64
    memory        u32 n, n x (str key, bytes value)        keys sorted
    handles       u32 n, n x (u64 vid, str kind, str gid, u32 m, m x u32)
    next_vid:u64
    replay_log    u32 n, n x (str call, value args, u64 vid)
    drained       u32 n, n x (u64 eid, u32 src, u64 vid, u32 tag, u64 seq, bytes)
    sent          u32 n, n x (u32 peer, str gid, u32 tag, u64 count)   sorted
    received      same as sent
    phase:u8
    pending       u8 flag [, str op, u64 vid, i32 root, str reduce, u32 nbytes]
    wrappers      u32 n, n x (str gid, u64 count)                       sorted

``str`` and ``bytes`` are u32-length-prefixed.  ``value`` is a tagged
encoding of ints, strings and tuples.  No engine name and no real
communicator id has a slot; attempting to encode a real id raises.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

from .engine import RealCommId
from .upperhalf import (CorruptImage, DrainedEnvelope, PendingCollective, ReplayEntry,
                        UpperHalfState, VirtualHandle, WrapperPhase)

MAGIC = b"MANA-SIM"
VERSION = 1
HEADER = MAGIC + bytes([VERSION])


class UnsupportedVersion(ValueError):
    pass


class RealIdLeak(TypeError):
    """A lower-half id was about to be written into an image."""


class MissingRank(ValueError):
    pass


class _Writer:
    def __init__(self) -> None:
        self.buf = bytearray()

    def _int(self, fmt: str, v) -> None:
        if isinstance(v, RealCommId):
            raise RealIdLeak(f"real communicator id {int(v)} in upper-half state")
        if isinstance(v, bool) or not isinstance(v, int):
            raise TypeError(f"expected int, got {type(v).__name__}")
        self.buf += struct.pack(fmt, v)

    def u8(self, v): self._int("<B", v)
    def u32(self, v): self._int("<I", v)
    def i32(self, v): self._int("<i", v)
    def u64(self, v): self._int("<Q", v)

    def raw(self, b: bytes) -> None:
        if isinstance(b, RealCommId):
            raise RealIdLeak(f"real communicator id {int(b)} in upper-half state")
        if not isinstance(b, (bytes, bytearray)):
            raise TypeError(f"expected bytes, got {type(b).__name__}")
        self.u32(len(b))
        self.buf += b

    def str(self, s: str) -> None:
        if not isinstance(s, str):
            raise TypeError(f"expected str, got {type(s).__name__}")
        self.raw(s.encode())

    def value(self, v) -> None:
        if isinstance(v, RealCommId):
            raise RealIdLeak(f"real communicator id {int(v)} in upper-half state")
        if isinstance(v, int) and not isinstance(v, bool):
            self.buf += b"i"
            self.buf += struct.pack("<q", v)
        elif isinstance(v, str):
            self.buf += b"s"
            self.str(v)
        elif isinstance(v, tuple):
            self.buf += b"t"
            self.u32(len(v))
            for x in v:
                self.value(x)
        else:
            raise TypeError(f"cannot encode {type(v).__name__} in replay arguments")


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptImage(f"truncated image: need {n} bytes at offset {self.pos}, "
                               f"have {len(self.data) - self.pos}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self._take(struct.calcsize(fmt)))[0]

    def u8(self): return self._unpack("<B")
    def u32(self): return self._unpack("<I")
    def i32(self): return self._unpack("<i")
    def u64(self): return self._unpack("<Q")

    def raw(self) -> bytes:
        return bytes(self._take(self.u32()))

    def str(self) -> str:
        try:
            return self.raw().decode()
        except UnicodeDecodeError as exc:
            raise CorruptImage(f"bad string at offset {self.pos}: {exc}") from None

    def value(self):
        tag = self._take(1)
        if tag == b"i":
            return self._unpack("<q")
        if tag == b"s":
            return self.str()
        if tag == b"t":
            return tuple(self.value() for _ in range(self.u32()))
        raise CorruptImage(f"bad value tag {tag!r} at offset {self.pos - 1}")


def encode_image(uh: UpperHalfState) -> bytes:
    w = _Writer()
    w.buf += HEADER
    w.u32(uh.rank)
    w.u32(uh.world_size)
    w.u64(uh.pc)
    w.u32(len(uh.memory))
    for k in sorted(uh.memory):
        w.str(k)
        w.raw(uh.memory[k])
    w.u32(len(uh.handles))
    for vid in sorted(uh.handles):
        h = uh.handles[vid]
        w.u64(h.vid)
        w.str(h.kind)
        w.str(h.gid)
        w.u32(len(h.members))
        for m in h.members:
            w.u32(m)
    w.u64(uh.next_vid)
    w.u32(len(uh.replay_log))
    for e in uh.replay_log:
        w.str(e.call)
        w.value(tuple(e.args))
        w.u64(e.vid)
    w.u32(len(uh.drained))
    for d in uh.drained:
        w.u64(d.eid)
        w.u32(d.src)
        w.u64(d.vid)
        w.u32(d.tag)
        w.u64(d.seq)
        w.raw(d.payload)
    for counters in (uh.sent, uh.received):
        w.u32(len(counters))
        for (peer, gid, tag) in sorted(counters):
            w.u32(peer)
            w.str(gid)
            w.u32(tag)
            w.u64(counters[(peer, gid, tag)])
    w.u8(int(uh.phase))
    p = uh.pending
    if p is None:
        w.u8(0)
    else:
        w.u8(1)
        w.str(p.op)
        w.u64(p.vid)
        w.i32(-1 if p.root is None else p.root)
        w.str(p.reduce or "")
        w.u32(p.nbytes)
    w.u32(len(uh.wrappers))
    for gid in sorted(uh.wrappers):
        w.str(gid)
        w.u64(uh.wrappers[gid])
    return bytes(w.buf)


def decode_image(data: bytes) -> UpperHalfState:
    if len(data) < len(HEADER):
        raise CorruptImage(f"image of {len(data)} bytes is shorter than its header")
    if data[:len(MAGIC)] != MAGIC:
        raise CorruptImage("bad magic")
    if data[len(MAGIC)] != VERSION:
        raise UnsupportedVersion(f"image version {data[len(MAGIC)]}, supported {VERSION}")
    r = _Reader(data)
    r.pos = len(HEADER)
    uh = UpperHalfState(r.u32(), r.u32())
    uh.pc = r.u64()
    uh.memory = {}
    for _ in range(r.u32()):
        k = r.str()
        uh.memory[k] = r.raw()
    uh.handles = {}
    for _ in range(r.u32()):
        vid = r.u64()
        kind, gid = r.str(), r.str()
        uh.handles[vid] = VirtualHandle(vid, kind, gid, tuple(r.u32() for _ in range(r.u32())))
    uh.next_vid = r.u64()
    uh.replay_log = []
    for _ in range(r.u32()):
        call = r.str()
        args = r.value()
        if not isinstance(args, tuple):
            raise CorruptImage("replay arguments must be a tuple")
        uh.replay_log.append(ReplayEntry(call, args, r.u64()))
    uh.drained = []
    for _ in range(r.u32()):
        uh.drained.append(DrainedEnvelope(r.u64(), r.u32(), r.u64(), r.u32(), r.u64(), r.raw()))
    for name in ("sent", "received"):
        counters = {}
        for _ in range(r.u32()):
            peer, gid, tag = r.u32(), r.str(), r.u32()
            counters[(peer, gid, tag)] = r.u64()
        setattr(uh, name, counters)
    try:
        uh.phase = WrapperPhase(r.u8())
    except ValueError as exc:
        raise CorruptImage(str(exc)) from None
    if r.u8():
        op, vid, root, red, nbytes = r.str(), r.u64(), r.i32(), r.str(), r.u32()
        uh.pending = PendingCollective(op, vid, None if root < 0 else root, red or None, nbytes)
    uh.wrappers = {}
    for _ in range(r.u32()):
        gid = r.str()
        uh.wrappers[gid] = r.u64()
    if r.pos != len(data):
        raise CorruptImage(f"{len(data) - r.pos} trailing bytes after image")
    if 0 not in uh.handles or uh.rank >= uh.world_size:
        raise CorruptImage("image lacks world handle or has rank outside world")
    uh.bindings = {}
    return uh


def write_image(uh: UpperHalfState, path) -> None:
    data = encode_image(uh)
    Path(path).write_bytes(data)


def read_image(path) -> UpperHalfState:
    return decode_image(Path(path).read_bytes())


def image_name(rank: int) -> str:
    return f"rank-{rank}.img"


def write_image_set(images: dict[int, bytes], directory, world_size: int, workload,
                    created_at_event: int) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for rank, data in sorted(images.items()):
        (d / image_name(rank)).write_bytes(data)
    manifest = {"world_size": world_size, "workload": workload, "created_at_event": created_at_event}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return d


class ImageSet:
    """A directory of per-rank images plus ``manifest.json``."""

    def __init__(self, directory) -> None:
        self.directory = Path(directory)
        mpath = self.directory / "manifest.json"
        if not mpath.exists():
            raise MissingRank(f"{self.directory}: no manifest.json")
        self.manifest = json.loads(mpath.read_text())
        self.world_size = int(self.manifest["world_size"])
        self.workload = self.manifest.get("workload")
        self.created_at_event = self.manifest.get("created_at_event")

    def validate(self) -> None:
        present = {p.name for p in self.directory.iterdir()} if self.directory.is_dir() else set()
        missing = [r for r in range(self.world_size) if image_name(r) not in present]
        if missing:
            raise MissingRank(f"{self.directory}: missing images for ranks {missing}")

    def load(self) -> list[UpperHalfState]:
        self.validate()
        states = []
        for r in range(self.world_size):
            uh = read_image(self.directory / image_name(r))
            if uh.rank != r or uh.world_size != self.world_size:
                raise CorruptImage(f"{image_name(r)} holds rank {uh.rank} of {uh.world_size}")
            states.append(uh)
        return states


def load_images(images: dict[int, bytes], world_size: int) -> list[UpperHalfState]:
    missing = [r for r in range(world_size) if r not in images]
    if missing:
        raise MissingRank(f"missing images for ranks {missing}")
    out = []
    for r in range(world_size):
        uh = decode_image(images[r])
        if uh.rank != r or uh.world_size != world_size:
            raise CorruptImage(f"image for rank {r} holds rank {uh.rank} of {uh.world_size}")
        out.append(uh)
    return out


def restart(states, engine, programs, **sim_kwargs):
    """Build a running simulation from restored upper halves.

    ``states`` is an :class:`ImageSet`, a rank->bytes mapping or a list of
    decoded states.  ``programs`` are the per-rank application programs.
    """
    from .runtime import Simulation

    if isinstance(states, ImageSet):
        states = states.load()
    elif isinstance(states, dict):
        states = load_images(states, len(programs))
    if len(states) != len(programs):
        raise MissingRank(f"{len(states)} images for {len(programs)} ranks")
    return Simulation.from_images(programs, engine, states, **sim_kwargs)
