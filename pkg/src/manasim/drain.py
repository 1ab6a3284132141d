"""Point-to-point quiescence: bookmark exchange, then drain.

Counts are keyed by ``(peer, gid, tag)`` where ``gid`` is the communicator's
creation lineage.  Unlike a vid it names the same communicator on every
rank, so a sender's count can be compared with a receiver's.
"""

from __future__ import annotations

from . import engine as eng
from .engine import LowerHalf
from .upperhalf import DrainedEnvelope, UpperHalfState


class LostMessage(RuntimeError):
    pass


def bookmark(uh: UpperHalfState, peer: int) -> tuple[tuple[str, int, int], ...]:
    """Sent counts toward ``peer`` as a sorted tuple of (gid, tag, count)."""
    return tuple(sorted((gid, tag, n) for (dst, gid, tag), n in uh.sent.items() if dst == peer))


def _buffered(uh: UpperHalfState) -> dict[tuple[int, str, int], int]:
    out: dict[tuple[int, str, int], int] = {}
    for d in uh.drained:
        k = (d.src, uh.handles[d.vid].gid, d.tag)
        out[k] = out.get(k, 0) + 1
    return out


def deficits(uh: UpperHalfState, bookmarks: dict[int, tuple]) -> dict[tuple[int, str, int], int]:
    """Messages each peer sent that this rank has neither received nor buffered."""
    buffered = _buffered(uh)
    marked = {(src, gid, tag) for src, marks in bookmarks.items() for gid, tag, _ in marks}
    for k, n in list(uh.received.items()) + list(buffered.items()):
        if n and k[0] in bookmarks and k not in marked:
            raise LostMessage(f"rank {uh.rank} holds {n} messages for {k} that were never sent")
    out = {}
    for src, marks in bookmarks.items():
        for gid, tag, n in marks:
            k = (src, gid, tag)
            d = n - uh.received.get(k, 0) - buffered.get(k, 0)
            if d < 0:
                raise LostMessage(f"rank {uh.rank} holds {-d} more messages for {k} than were sent")
            if d:
                out[k] = d
    return out


def exchange_bookmarks(ranks: list[UpperHalfState]) -> list[dict[tuple[int, str, int], int]]:
    """All-to-all exchange: entry ``r`` is rank r's deficit map."""
    n = len(ranks)
    return [deficits(ranks[r], {p: bookmark(ranks[p], r) for p in range(n) if p != r})
            for r in range(n)]


def _gid_of(uh: UpperHalfState, comm: int) -> tuple[int, str] | None:
    for vid, real in uh.bindings.items():
        if real == comm and uh.handles[vid].kind == "communicator":
            return vid, uh.handles[vid].gid
    return None


def _candidates(uh: UpperHalfState, lh: LowerHalf, defs: dict) -> list[int] | None:
    """Inbox positions to drain, or None if some are still in transit."""
    need = dict(defs)
    picks = []
    for i, e in enumerate(lh.inbox[uh.rank]):
        if e.ctx != eng.P2P:
            continue
        vg = _gid_of(uh, e.comm)
        if vg is None:
            continue
        k = (e.src, vg[1], e.tag)
        if need.get(k, 0) > 0:
            need[k] -= 1
            picks.append(i)
    if any(need.values()):
        return None
    return picks


def drain_ready(uh: UpperHalfState, lh: LowerHalf, defs: dict) -> bool:
    return _candidates(uh, lh, defs) is not None


def drain_messages(uh: UpperHalfState, lh: LowerHalf, defs: dict, drop: int = 0) -> list[DrainedEnvelope]:
    """Move exactly ``defs`` envelopes from the engine into ``uh.drained``.

    Envelopes are taken earliest-first per key.  ``drop`` discards that many
    of them (fault injection only).
    """
    picks = _candidates(uh, lh, defs)
    if picks is None:
        raise LostMessage(f"rank {uh.rank}: deficits {defs} not available")
    inbox = lh.inbox[uh.rank]
    taken = [inbox[i] for i in picks]
    for i in reversed(picks):
        del inbox[i]
    new = []
    for e in taken:
        vid, _ = _gid_of(uh, e.comm)
        new.append(DrainedEnvelope(e.eid, e.src, vid, e.tag, e.seq, e.payload))
    new = new[drop:]
    uh.drained.extend(new)
    return new


def conservation_errors(uh: UpperHalfState, bookmarks: dict[int, tuple]) -> list[str]:
    """Check sent == received + drained for every key toward this rank."""
    buffered = _buffered(uh)
    errs = []
    keys = set()
    for src, marks in bookmarks.items():
        for gid, tag, n in marks:
            k = (src, gid, tag)
            keys.add(k)
            got = uh.received.get(k, 0) + buffered.get(k, 0)
            if got != n:
                errs.append(f"{k}: sent {n} != received+drained {got}")
    for k, n in list(uh.received.items()) + list(buffered.items()):
        if k not in keys and k[0] in bookmarks and n:
            errs.append(f"{k}: {n} received/drained but never sent")
    return errs
