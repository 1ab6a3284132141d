from __future__ import annotations

import pytest

from manasim import coordinator as co
from manasim.coordinator import ControlMessage as M
from manasim.upperhalf import WrapperPhase as P


def report(state, rnd=0, epoch=0, at_gate=False):
    return M(co.REPORT, epoch, rnd, state, at_gate=at_gate)


def test_begin_sends_intend_to_all():
    c = co.CoordinatorState(4)
    out = co.begin_checkpoint(c)
    assert [d for d, _ in out] == [0, 1, 2, 3]
    assert {(m.kind, m.round) for _, m in out} == {(co.INTEND, 0)}
    with pytest.raises(co.AlreadyInProgress):
        co.begin_checkpoint(c)


def test_all_ready_commits_without_extra_iteration():
    c = co.CoordinatorState(2)
    co.begin_checkpoint(c)
    assert co.on_coordinator_message(c, 0, report(co.READY)) == ([], None)
    out, note = co.on_coordinator_message(c, 1, report(co.READY))
    assert note == "commit" and {m.kind for _, m in out} == {co.DO_CKPT}
    assert c.extra_rounds == 0


def test_exit_phase2_forces_extra_round():
    c = co.CoordinatorState(2)
    co.begin_checkpoint(c)
    co.on_coordinator_message(c, 0, report(co.READY))
    out, note = co.on_coordinator_message(c, 1, report(co.EXIT_PHASE_2))
    assert note == "extra-iteration"
    assert [(d, m.kind, m.round) for d, m in out] == [(0, co.EXTRA, 1), (1, co.EXTRA, 1)]


def test_skip_mutant_commits_anyway():
    c = co.CoordinatorState(2, skip_extra_iteration=True)
    co.begin_checkpoint(c)
    co.on_coordinator_message(c, 0, report(co.READY))
    _, note = co.on_coordinator_message(c, 1, report(co.EXIT_PHASE_2))
    assert note == "commit"


def test_gate_notice_gets_free_pass_and_dirties_round():
    c = co.CoordinatorState(2)
    co.begin_checkpoint(c)
    out, _ = co.on_coordinator_message(c, 0, M(co.GATE_NOTICE, 0, 0))
    assert out == [(0, M(co.FREE_PASS, 0, 0))]
    co.on_coordinator_message(c, 0, report(co.READY))
    _, note = co.on_coordinator_message(c, 1, report(co.READY))
    assert note == "extra-iteration"


def test_stale_messages_are_ignored():
    c = co.CoordinatorState(2)
    co.begin_checkpoint(c)
    assert co.on_coordinator_message(c, 0, report(co.READY, epoch=7))[1] == "stale-epoch"
    assert co.on_coordinator_message(c, 0, report(co.READY, rnd=3))[1] == "stale-round"


def test_acks_then_resume():
    c = co.CoordinatorState(2)
    co.begin_checkpoint(c)
    co.on_coordinator_message(c, 0, report(co.READY))
    co.on_coordinator_message(c, 1, report(co.READY))
    assert co.on_coordinator_message(c, 0, M(co.CKPT_DONE, 0, 0))[1] is None
    out, note = co.on_coordinator_message(c, 1, M(co.CKPT_DONE, 0, 0))
    assert note == "resume" and len(out) == 2 and c.phase == "done"
    co.begin_checkpoint(c)
    assert c.epoch == 1


def test_unexpected_message_is_protocol_error():
    c = co.CoordinatorState(1)
    c.epoch = 0
    with pytest.raises(co.ProtocolError):
        co.on_coordinator_message(c, 0, M(co.CKPT_DONE, 0, 0))


def test_rank_replies_by_phase():
    intend = M(co.INTEND, 0, 0)
    h = co.Helper()
    assert co.on_rank_control(h, P.NONE, False, intend).state == co.READY
    assert not co.may_enter_wrapper(h)
    h = co.Helper()
    r = co.on_rank_control(h, P.PHASE1, False, intend)
    assert r.state == co.IN_PHASE_1 and not co.may_enter_phase2(h)
    h = co.Helper()
    assert co.on_rank_control(h, P.PHASE2, False, intend) is None
    assert co.phase2_exit_report(h).state == co.EXIT_PHASE_2
    assert co.phase2_exit_report(h) is None


def test_free_pass_lets_held_rank_through():
    h = co.Helper()
    co.on_rank_control(h, P.PHASE1, True, M(co.INTEND, 0, 0))
    h.free_pass = True
    assert co.may_enter_phase2(h)
    assert co.on_rank_control(h, P.PHASE1, True, M(co.EXTRA, 0, 1)) is None
    co.on_resume(h)
    assert co.may_enter_wrapper(h) and not h.free_pass
