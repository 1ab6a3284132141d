"""Checkpoint coordinator and per-rank checkpoint helper.

The coordinator runs request/report rounds until no rank reports having just
left a collective, then orders the checkpoint.  Each rank's helper answers
from the rank's wrapper phase and holds the rank before its next collective
until the checkpoint is over.

Beyond the three rank states, a few control messages keep the protocol live:

* ``gate-notice`` / ``free-pass``: a rank that leaves its trivial barrier
  after being asked to checkpoint reports it; the coordinator lets it into
  the collective and runs one more round.  Without this, a member that was
  already inside the collective would wait forever for the held member.
* ``bookmark``: sent-message counts exchanged between helpers before draining.
* ``ckpt-done`` / ``resume``: every image is written before any rank resumes.
"""

from __future__ import annotations

from typing import NamedTuple

from .upperhalf import WrapperPhase

INTEND = "intend-to-checkpoint"
EXTRA = "extra-iteration"
DO_CKPT = "do-ckpt"
REPORT = "state-report"
GATE_NOTICE = "gate-notice"
FREE_PASS = "free-pass"
BOOKMARK = "bookmark"
CKPT_DONE = "ckpt-done"
RESUME = "resume"

READY = "ready"
IN_PHASE_1 = "in-phase-1"
EXIT_PHASE_2 = "exit-phase-2"

COORD = -1


class ProtocolError(RuntimeError):
    pass


class AlreadyInProgress(ProtocolError):
    pass


class ControlMessage(NamedTuple):
    kind: str
    epoch: int
    round: int
    state: str | None = None
    at_gate: bool = False
    body: tuple = ()

    def detail(self) -> dict:
        d = {"msg": self.kind, "epoch": self.epoch, "round": self.round}
        if self.kind == REPORT:
            d["state"] = self.state
            d["at_gate"] = self.at_gate
        if self.body:
            d["body"] = [list(x) if isinstance(x, tuple) else x for x in self.body]
        return d


class CoordinatorState:
    __slots__ = ("n", "phase", "epoch", "round", "last_reports", "dirty", "acks",
                 "skip_extra_iteration", "extra_rounds")

    def __init__(self, n: int, skip_extra_iteration: bool = False) -> None:
        self.n = n
        self.phase = "idle"
        self.epoch = -1
        self.round = 0
        self.last_reports: dict[int, str] = {}
        self.dirty = False
        self.acks: frozenset[int] = frozenset()
        self.skip_extra_iteration = skip_extra_iteration
        self.extra_rounds = 0

    def clone(self) -> CoordinatorState:
        c = CoordinatorState.__new__(CoordinatorState)
        for s in CoordinatorState.__slots__:
            setattr(c, s, getattr(self, s))
        c.last_reports = dict(self.last_reports)
        return c

    def key(self) -> tuple:
        return (self.phase, self.epoch, self.round, tuple(sorted(self.last_reports.items())),
                self.dirty, tuple(sorted(self.acks)))


Outgoing = list[tuple[int, ControlMessage]]


def begin_checkpoint(coord: CoordinatorState) -> Outgoing:
    if coord.phase in ("collecting", "committing"):
        raise AlreadyInProgress(f"checkpoint epoch {coord.epoch} still {coord.phase}")
    coord.phase = "collecting"
    coord.epoch += 1
    coord.round = 0
    coord.last_reports = {}
    coord.dirty = False
    coord.acks = frozenset()
    msg = ControlMessage(INTEND, coord.epoch, 0)
    return [(r, msg) for r in range(coord.n)]


def on_coordinator_message(coord: CoordinatorState, src: int, msg: ControlMessage) -> tuple[Outgoing, str | None]:
    """Handle one message from a rank helper.  Returns (sends, note)."""
    if msg.epoch != coord.epoch:
        return [], "stale-epoch"
    if msg.kind in (GATE_NOTICE, REPORT) and coord.phase == "collecting":
        out: Outgoing = []
        if msg.kind == GATE_NOTICE or (msg.state == IN_PHASE_1 and msg.at_gate):
            out.append((src, ControlMessage(FREE_PASS, coord.epoch, coord.round)))
            coord.dirty = True
        if msg.kind == GATE_NOTICE:
            return out, None
        if msg.round != coord.round:
            return out, "stale-round"
        coord.last_reports[src] = msg.state
        if len(coord.last_reports) < coord.n:
            return out, None
        again = coord.dirty or EXIT_PHASE_2 in coord.last_reports.values()
        if again and not coord.skip_extra_iteration:
            coord.round += 1
            coord.extra_rounds += 1
            coord.last_reports = {}
            coord.dirty = False
            m = ControlMessage(EXTRA, coord.epoch, coord.round)
            return out + [(r, m) for r in range(coord.n)], "extra-iteration"
        coord.phase = "committing"
        m = ControlMessage(DO_CKPT, coord.epoch, coord.round)
        return out + [(r, m) for r in range(coord.n)], "commit"
    if msg.kind in (GATE_NOTICE, REPORT):
        # rank left its barrier after the decision; it stays held until resume
        return [], "late-" + msg.kind
    if msg.kind == CKPT_DONE and coord.phase == "committing":
        coord.acks = coord.acks | {src}
        if len(coord.acks) == coord.n:
            coord.phase = "done"
            m = ControlMessage(RESUME, coord.epoch, coord.round)
            return [(r, m) for r in range(coord.n)], "resume"
        return [], None
    raise ProtocolError(f"coordinator in {coord.phase} got {msg.kind} from rank {src}")


class Helper:
    """Checkpoint-helper state of one rank."""

    __slots__ = ("epoch", "round", "intend", "free_pass", "deferred", "quiesced", "bookmarks",
                 "deficits", "image_written")

    def __init__(self) -> None:
        self.epoch = -1
        self.round = 0
        self.intend = False
        self.free_pass = False
        self.deferred = False
        self.quiesced = False
        self.bookmarks: dict[int, tuple] = {}
        self.deficits: dict | None = None
        self.image_written = False

    def clone(self) -> Helper:
        h = Helper.__new__(Helper)
        for s in Helper.__slots__:
            setattr(h, s, getattr(self, s))
        h.bookmarks = dict(self.bookmarks)
        return h

    def key(self) -> tuple:
        return (self.epoch, self.round, self.intend, self.free_pass, self.deferred, self.quiesced,
                tuple(sorted(self.bookmarks.items())),
                None if self.deficits is None else tuple(sorted(self.deficits.items())),
                self.image_written)


def committed_to_phase2(helper: Helper, phase: WrapperPhase) -> bool:
    return phase == WrapperPhase.PHASE2 or (phase == WrapperPhase.PHASE1 and helper.free_pass)


def on_rank_control(helper: Helper, phase: WrapperPhase, at_gate: bool,
                    msg: ControlMessage) -> ControlMessage | None:
    """React to intend-to-checkpoint or extra-iteration.

    Returns the immediate state report, or None when the rank is inside a
    collective and will report once it leaves.
    """
    if msg.kind not in (INTEND, EXTRA):
        raise ProtocolError(f"on_rank_control got {msg.kind}")
    helper.epoch = msg.epoch
    helper.round = msg.round
    helper.intend = True
    if committed_to_phase2(helper, phase):
        helper.deferred = True
        return None
    state = READY if phase == WrapperPhase.NONE else IN_PHASE_1
    return ControlMessage(REPORT, msg.epoch, msg.round, state, at_gate=at_gate)


def phase2_exit_report(helper: Helper) -> ControlMessage | None:
    """Deferred report when the rank leaves a collective."""
    if not helper.deferred:
        return None
    helper.deferred = False
    return ControlMessage(REPORT, helper.epoch, helper.round, EXIT_PHASE_2)


def may_enter_wrapper(helper: Helper) -> bool:
    """Gate before phase 1 of the next collective."""
    return not helper.intend


def may_enter_phase2(helper: Helper, gate_enabled: bool = True) -> bool:
    """Gate between the trivial barrier and the real collective."""
    return not helper.intend or helper.free_pass or not gate_enabled


def on_resume(helper: Helper) -> None:
    helper.intend = False
    helper.free_pass = False
    helper.deferred = False
    helper.quiesced = False
    helper.bookmarks = {}
    helper.deficits = None
    helper.image_written = False
