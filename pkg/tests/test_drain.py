from __future__ import annotations

import pytest

from manasim import drain as dr
from manasim import engine as eng
from manasim import upperhalf as uhm


def pair():
    lh = eng.engine_init(eng.engine_id("linear"), 2)
    return lh, uhm.new_upper_half(0, lh), uhm.new_upper_half(1, lh)


def test_no_traffic_no_deficit():
    _, a, b = pair()
    assert dr.exchange_bookmarks([a, b]) == [{}, {}]


def test_three_sent_one_received_leaves_two():
    lh, a, b = pair()
    for i in range(3):
        eng.deliver(lh, uhm.v_send(a, lh, 1, 5, 0, bytes([i])))
    uhm.v_recv(b, lh, 0, 5, 0)
    defs = dr.exchange_bookmarks([a, b])
    assert defs[1] == {(0, "w", 5): 2} and defs[0] == {}
    new = dr.drain_messages(b, lh, defs[1])
    assert [d.payload for d in new] == [b"\x01", b"\x02"]
    assert lh.inbox[1] == []
    assert dr.conservation_errors(b, {0: dr.bookmark(a, 1)}) == []
    assert dr.drain_messages(b, lh, {}) == [] and len(b.drained) == 2


def test_in_transit_not_ready():
    lh, a, b = pair()
    env = uhm.v_send(a, lh, 1, 5, 0, b"x")
    defs = dr.exchange_bookmarks([a, b])[1]
    assert not dr.drain_ready(b, lh, defs)
    eng.deliver(lh, env)
    assert dr.drain_ready(b, lh, defs)


def test_ping_pong_balanced():
    lh, a, b = pair()
    eng.deliver(lh, uhm.v_send(a, lh, 1, 1, 0, b"p"))
    uhm.v_recv(b, lh, 0, 1, 0)
    eng.deliver(lh, uhm.v_send(b, lh, 0, 1, 0, b"q"))
    uhm.v_recv(a, lh, 1, 1, 0)
    assert dr.exchange_bookmarks([a, b]) == [{}, {}]


def test_dropped_message_breaks_conservation():
    lh, a, b = pair()
    for _ in range(2):
        eng.deliver(lh, uhm.v_send(a, lh, 1, 5, 0, b"x"))
    defs = dr.exchange_bookmarks([a, b])[1]
    dr.drain_messages(b, lh, defs, drop=1)
    assert dr.conservation_errors(b, {0: dr.bookmark(a, 1)})


def test_more_received_than_sent_is_lost_message():
    _, a, b = pair()
    b.received[(0, "w", 5)] = 1
    with pytest.raises(dr.LostMessage):
        dr.exchange_bookmarks([a, b])
