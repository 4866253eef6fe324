import itertools
import time

import pytest

from conftest import Collector, frame
from nbrpc import nal
from nbrpc.errors import ErrorCode, NbrpcError, Status
from nbrpc.nal import Permission
from nbrpc.transport.loop import FABRIC

_n = itertools.count()


@pytest.fixture
def loop_ep():
    made = []

    def make(name=None):
        sink = Collector()
        ep = FABRIC.listen(name or f"lt-{next(_n)}", sink)
        ep.collected = sink
        made.append(ep)
        return ep

    yield make
    for ep in made:
        ep.close()


def test_listen_twice(loop_ep):
    loop_ep("dup-a")
    with pytest.raises(NbrpcError) as e:
        loop_ep("dup-a")
    assert e.value.code is ErrorCode.ADDRESS_IN_USE


def test_locator_free_after_close(loop_ep):
    ep = loop_ep("reuse-me")
    ep.close()
    loop_ep("reuse-me").close()


def test_send_between_two(loop_ep):
    a, b = loop_ep(), loop_ep()
    a.send_unexpected(nal.parse_address(b.address.canonical), frame(payload=b"hi"))
    a.progress(0)
    assert b.recv_unexpected() is None
    b.progress(0)
    src, msg = b.recv_unexpected()
    assert src == a.address and msg.endswith(b"hi")


def test_self_send_same_call(loop_ep):
    a = loop_ep()
    a.send_unexpected(a.address, frame())
    assert a.progress(0) == 2
    assert a.recv_unexpected() is not None


def test_completion_deferred_to_progress(loop_ep):
    a, b = loop_ep(), loop_ep()
    src = bytearray(b"0123456789")
    key = b.mem_expose(src, Permission.READ)
    dst = bytearray(10)
    a.get(b.address, key, 0, dst, 10)
    a.send_unexpected(b.address, frame())
    # nothing happens before progress
    assert a.collected.items == []
    assert dst == bytes(10)
    b.progress(0)
    assert b.recv_unexpected() is None
    a.progress(0)
    assert [c.status for c in a.collected.items] == [Status.OK, Status.OK]
    assert dst == src


def test_get_own_region(loop_ep):
    a = loop_ep()
    src = bytes(range(50))
    key = a.mem_expose(src, Permission.READ)
    dst = bytearray(50)
    a.get(a.address, key, 0, dst, 50)
    a.progress(0)
    assert dst == src


def test_get_unknown_key(loop_ep):
    a = loop_ep()
    a.get(a.address, 424242, 0, bytearray(4), 4)
    a.progress(0)
    assert a.collected.items[0].status is Status.REMOTE_ERROR


def _script(a, b):
    key = b.mem_expose(bytearray(64))
    a.send_unexpected(b.address, frame(cookie=1), tag="s1")
    a.get(b.address, key, 0, bytearray(8), 8, tag="g1")
    a.put(b.address, key + 9, 0, b"x", 1, tag="p-bad")
    a.send_unexpected("loop://nobody-here", frame(cookie=2), tag="s-lost")
    a.put(b.address, key, 8, b"y" * 8, 8, tag="p1")
    a.progress(0)
    b.progress(0)
    a.progress(0)
    return [(c.op_kind, c.status, c.tag) for c in a.collected.items]


def test_deterministic_order(loop_ep):
    first = _script(loop_ep(), loop_ep())
    second = _script(loop_ep(), loop_ep())
    assert first == second
    assert [t for _, _, t in first] == ["s1", "g1", "p-bad", "s-lost", "p1"]
    assert [s for _, s, _ in first] == [Status.OK, Status.OK, Status.REMOTE_ERROR,
                                        Status.TRANSPORT_ERROR, Status.OK]


def test_fault_drop_next(loop_ep):
    a, b = loop_ep(), loop_ep()
    a.faults.drop_next = 2
    for i in range(3):
        a.send_unexpected(b.address, frame(cookie=i))
    a.progress(0)
    b.progress(0)
    assert [c.status for c in a.collected.items] == [Status.OK] * 3
    (_, msg), = [b.recv_unexpected()]
    assert b.recv_unexpected() is None
    assert msg == frame(cookie=2)


def test_fault_delay(loop_ep):
    a = loop_ep()
    a.faults.delay = 0.05
    a.send_unexpected(a.address, frame())
    t0 = time.monotonic()
    assert a.progress(0) == 0
    assert a.progress(1.0) >= 1
    assert time.monotonic() - t0 >= 0.04


def test_stalled_until_cleared(loop_ep):
    a, b = loop_ep(), loop_ep()
    b.faults.stalled = True
    a.send_unexpected(b.address, frame())
    a.progress(0.02)
    assert a.collected.items == []
    b.faults.stalled = False
    a.progress(0)
    assert a.collected.items[0].status is Status.OK


def test_unexpected_capacity(loop_ep):
    a, b = loop_ep(), loop_ep()
    b.unexpected_capacity = 3
    for i in range(5):
        a.send_unexpected(b.address, frame(cookie=i))
    a.progress(0)
    assert [c.status for c in a.collected.items] == [Status.OK] * 3 + [Status.TRANSPORT_ERROR] * 2


def test_send_to_closed_peer(loop_ep):
    a, b = loop_ep(), loop_ep()
    b.close()
    a.send_unexpected(b.address, frame())
    a.progress(0)
    assert a.collected.items[0].status is Status.TRANSPORT_ERROR


def test_cross_plugin_rejected(loop_ep):
    a = loop_ep()
    with pytest.raises(NbrpcError) as e:
        a.send_unexpected("tcp://127.0.0.1:1", frame())
    assert e.value.code is ErrorCode.UNKNOWN_PLUGIN
