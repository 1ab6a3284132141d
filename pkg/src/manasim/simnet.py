"""Deterministic discrete-event kernel.

Every simulation built on :class:`Kernel` is a pure function of its initial
state and the :class:`Schedule` that resolves each choice among enabled
events.  There is no clock; time is the count of executed events.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Any, NamedTuple


class SimulationHalted(RuntimeError):
    """Raised when an event is scheduled after the global stop."""


class ScheduleExhausted(RuntimeError):
    """A scripted schedule ran out of decisions or named an invalid index."""


class Event(NamedTuple):
    eid: int
    actor: str
    kind: str
    data: Any = None


class Quiescent(NamedTuple):
    """Returned by :meth:`Kernel.step` when no event is enabled."""

    pending: int


class StepResult(NamedTuple):
    executed: int


@dataclass
class Schedule:
    """Resolves nondeterminism.  Either seeded-random or an explicit script.

    A scripted decision ``d`` picks ``enabled[d]`` where ``enabled`` is in
    ascending event-id order.
    """

    seed: int | None = None
    decisions: list[int] | None = None
    cursor: int = 0
    taken: list[int] = field(default_factory=list)
    _rng: random.Random | None = field(default=None, repr=False)

    @classmethod
    def seeded(cls, seed: int) -> Schedule:
        return cls(seed=seed, _rng=random.Random(seed))

    @classmethod
    def scripted(cls, decisions: list[int]) -> Schedule:
        return cls(decisions=list(decisions))

    @property
    def mode(self) -> str:
        return "scripted" if self.decisions is not None else "seeded"

    def choose(self, n_enabled: int) -> int:
        if self.decisions is not None:
            if self.cursor >= len(self.decisions):
                raise ScheduleExhausted(f"no decision left at cursor {self.cursor}")
            d = self.decisions[self.cursor]
            if not 0 <= d < n_enabled:
                raise ScheduleExhausted(
                    f"decision {d} out of range for {n_enabled} enabled events "
                    f"at cursor {self.cursor}"
                )
        elif n_enabled == 1:
            d = 0
        else:
            if self._rng is None:
                self._rng = random.Random(self.seed or 0)
            d = self._rng.randrange(n_enabled)
        self.cursor += 1
        self.taken.append(d)
        return d


class EventQueue:
    """Pending events keyed by strictly increasing id."""

    __slots__ = ("pending", "next_id", "halted")

    def __init__(self) -> None:
        self.pending: dict[int, Event] = {}
        self.next_id = 0
        self.halted = False

    def schedule_event(self, actor: str, kind: str, data: Any = None) -> int:
        if self.halted:
            raise SimulationHalted(f"cannot schedule {kind!r} for {actor}: simulation halted")
        eid = self.next_id
        self.next_id += 1
        self.pending[eid] = Event(eid, actor, kind, data)
        return eid

    def pop(self, eid: int) -> Event:
        return self.pending.pop(eid)

    def clone(self) -> EventQueue:
        q = EventQueue.__new__(EventQueue)
        q.pending = dict(self.pending)
        q.next_id = self.next_id
        q.halted = self.halted
        return q

    def __len__(self) -> int:
        return len(self.pending)


class Kernel:
    """Serialized executor: one enabled event per :meth:`step`.

    Subclasses implement :meth:`is_enabled` and :meth:`execute`.  Executed
    events are appended to ``trace`` as dicts unless ``record`` is false.
    """

    def __init__(self, record: bool = True) -> None:
        self.queue = EventQueue()
        self.record = record
        self.trace: list[dict] = []
        self.steps = 0

    def schedule_event(self, actor: str, kind: str, data: Any = None) -> int:
        return self.queue.schedule_event(actor, kind, data)

    def is_enabled(self, ev: Event) -> bool:
        return True

    def execute(self, ev: Event) -> dict | None:
        raise NotImplementedError

    def enabled_events(self) -> list[int]:
        # dict preserves insertion order and ids are issued increasing
        return [eid for eid, ev in self.queue.pending.items() if self.is_enabled(ev)]

    def forced_event(self) -> int | None:
        """Hook for events that must run next regardless of the schedule."""
        return None

    def step(self, sched: Schedule) -> StepResult | Quiescent:
        eid = self.forced_event()
        if eid is None:
            enabled = self.enabled_events()
            if not enabled:
                return Quiescent(len(self.queue))
            eid = enabled[sched.choose(len(enabled))]
        self.fire(eid)
        return StepResult(eid)

    def fire(self, eid: int) -> None:
        ev = self.queue.pop(eid)
        detail = self.execute(ev)
        self.steps += 1
        if self.record:
            self.trace.append(
                {"id": ev.eid, "actor": ev.actor, "kind": ev.kind, "detail": detail or {}}
            )

    def halt(self) -> None:
        self.queue.halted = True


def encode_trace_line(rec: dict) -> str:
    return json.dumps(
        {"id": rec["id"], "actor": rec["actor"], "kind": rec["kind"], "detail": rec["detail"]},
        separators=(",", ":"),
        sort_keys=False,
        default=_json_default,
    )


def _json_default(obj: Any) -> Any:
    if isinstance(obj, (bytes, bytearray)):
        return obj.hex()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def trace_bytes(trace: list[dict]) -> bytes:
    return "".join(encode_trace_line(r) + "\n" for r in trace).encode()


def write_trace(trace: list[dict], path) -> None:
    with open(path, "wb") as f:
        f.write(trace_bytes(trace))


def read_trace(path) -> list[dict]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed trace line: {exc}") from None
            if not isinstance(rec, dict) or not {"id", "actor", "kind", "detail"} <= rec.keys():
                raise ValueError(f"{path}:{lineno}: trace record missing fields")
            out.append(rec)
    return out
