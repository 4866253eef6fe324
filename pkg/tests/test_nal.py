import contextlib
import mmap
import socket
import time
import tracemalloc

import pytest

from conftest import closed_tcp_port, frame, pump
from nbrpc import nal, wire
from nbrpc.errors import ErrorCode, NbrpcError, Status
from nbrpc.nal import NetAddress, OpKind, Permission, parse_address


class TestAddress:
    def test_tcp(self):
        assert parse_address("tcp://127.0.0.1:7777") == NetAddress("tcp", "127.0.0.1:7777")

    def test_loop(self):
        a = parse_address("loop://self")
        assert (a.plugin, a.locator) == ("loop", "self")
        assert a.canonical == "loop://self"
        assert parse_address(a.canonical) == a

    def test_unknown_plugin(self):
        with pytest.raises(NbrpcError) as e:
            parse_address("ib://x")
        assert e.value.code is ErrorCode.UNKNOWN_PLUGIN

    @pytest.mark.parametrize("uri", ["", "loop", "loop://", "tcp:/x", "TCP://x", "://x"])
    def test_bad_uri(self, uri):
        with pytest.raises(NbrpcError) as e:
            parse_address(uri)
        assert e.value.code is ErrorCode.BAD_URI

    def test_plugin_names_lowercase(self):
        with pytest.raises(ValueError):
            nal.register_plugin("IB", object())

    def test_registry(self):
        assert {"loop", "tcp"} <= set(nal.registered_plugins())
        nal.register_plugin("fake", object())
        try:
            assert parse_address("fake://z").plugin == "fake"
        finally:
            nal.unregister_plugin("fake")
        with pytest.raises(NbrpcError):
            parse_address("fake://z")


@contextlib.contextmanager
def stalled_peer(transport, make_endpoint):
    """An address whose owner never answers anything."""
    if transport == "loop":
        ep = make_endpoint()
        ep.faults.stalled = True
        yield ep
        return
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen(4)
    try:
        yield NetAddress("tcp", f"127.0.0.1:{s.getsockname()[1]}")
    finally:
        s.close()


def _addr(x):
    return x.address if isinstance(x, nal.Endpoint) else x


class TestSendRecv:
    def test_idle_progress(self, make_endpoint):
        ep = make_endpoint()
        t0 = time.monotonic()
        assert ep.progress(0) == 0
        assert time.monotonic() - t0 < 0.05

    def test_self_send_empty_payload(self, make_endpoint):
        ep = make_endpoint()
        msg = frame()
        token = ep.send_unexpected(ep.address, msg, tag="t")
        got = []
        pump([ep], lambda: got.append(ep.recv_unexpected()) or got[-1] is not None)
        assert got[-1] == (ep.address, msg)
        pump([ep], lambda: ep.collected.by_token(token))
        (c,) = ep.collected.by_token(token)
        assert c.op_kind is OpKind.SEND and c.status is Status.OK and c.tag == "t"

    def test_progress_counts_self_send(self, make_endpoint, transport):
        ep = make_endpoint()
        ep.send_unexpected(ep.address, frame())
        if transport == "loop":
            assert ep.progress(0) >= 1
        else:
            assert ep.progress(1.0) >= 1

    def test_eager_boundary(self, make_endpoint):
        ep = make_endpoint(eager_limit=4096)
        ep.send_unexpected(ep.address, frame(payload=bytes(4096)))
        with pytest.raises(NbrpcError) as e:
            ep.send_unexpected(ep.address, frame(payload=bytes(4097)))
        assert e.value.code is ErrorCode.OVERSIZE

    def test_rejects_non_metadata_frame(self, make_endpoint):
        ep = make_endpoint()
        with pytest.raises(NbrpcError):
            ep.send_unexpected(ep.address, frame(kind=wire.Kind.BULK_ACK))
        with pytest.raises(NbrpcError):
            ep.send_unexpected(ep.address, b"not a frame at all, surely not")

    def test_recv_nothing(self, make_endpoint):
        ep = make_endpoint()
        ep.progress(0)
        assert ep.recv_unexpected() is None

    def test_pair_fifo(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        msgs = [frame(cookie=i, payload=b"m%d" % i) for i in range(200)]
        for m in msgs:
            a.send_unexpected(b.address, m)
        got = []

        def drained():
            while (item := b.recv_unexpected()) is not None:
                got.append(item)
            return len(got) == len(msgs)

        pump([a, b], drained)
        assert [m for _, m in got] == msgs
        assert all(src == a.address for src, _ in got)

    def test_after_close(self, make_endpoint):
        ep = make_endpoint()
        ep.close()
        for call in (ep.recv_unexpected, lambda: ep.progress(0),
                     lambda: ep.send_unexpected(ep.address, frame())):
            with pytest.raises(NbrpcError) as e:
                call()
            assert e.value.code is ErrorCode.CLOSED

    def test_close_cancels_pending(self, make_endpoint, transport):
        ep = make_endpoint()
        with stalled_peer(transport, make_endpoint) as peer:
            token = ep.get(_addr(peer), 1, 0, bytearray(10), 10)
            ep.close()
        (c,) = ep.collected.by_token(token)
        assert c.status is Status.CANCELED

    def test_unreachable_tcp(self, make_endpoint, transport):
        if transport != "tcp":
            pytest.skip("tcp only")
        ep = make_endpoint()
        token = ep.send_unexpected(f"tcp://127.0.0.1:{closed_tcp_port()}", frame())
        pump([ep], lambda: ep.collected.by_token(token))
        assert ep.collected.by_token(token)[0].status is Status.TRANSPORT_ERROR

    def test_progress_timeout_bound(self, make_endpoint):
        ep = make_endpoint()
        t0 = time.monotonic()
        assert ep.progress(0.1) == 0
        elapsed = time.monotonic() - t0
        assert 0.05 <= elapsed < 0.5


class TestMemory:
    def test_distinct_keys(self, make_endpoint):
        ep = make_endpoint()
        keys = {ep.mem_expose(bytearray(8)) for _ in range(50)}
        assert len(keys) == 50

    def test_keys_not_reused(self, make_endpoint):
        ep = make_endpoint()
        k1 = ep.mem_expose(bytearray(8))
        ep.mem_unexpose(k1)
        assert ep.mem_expose(bytearray(8)) != k1

    def test_empty_region(self, make_endpoint):
        ep = make_endpoint()
        with pytest.raises(NbrpcError) as e:
            ep.mem_expose(bytearray())
        assert e.value.code is ErrorCode.EMPTY_REGION

    def test_expose_after_close(self, make_endpoint):
        ep = make_endpoint()
        ep.close()
        with pytest.raises(NbrpcError) as e:
            ep.mem_expose(bytearray(1))
        assert e.value.code is ErrorCode.CLOSED

    def test_expose_one_gib_without_copy(self, make_endpoint):
        ep = make_endpoint()
        region = mmap.mmap(-1, 1 << 30)
        tracemalloc.start()
        try:
            key = ep.mem_expose(region)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        assert key > 0
        assert peak < 1 << 20
        ep.mem_unexpose(key)
        ep.close()
        region.close()

    def test_unexposed_key_is_remote_error(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        key = b.mem_expose(bytearray(b"abc"))
        b.mem_unexpose(key)
        token = a.get(b.address, key, 0, bytearray(3), 3)
        pump([a, b], lambda: a.collected.by_token(token))
        assert a.collected.by_token(token)[0].status is Status.REMOTE_ERROR


def _transfer(a, b, fn, *args):
    token = fn(*args)
    pump([a, b], lambda: a.collected.by_token(token))
    (c,) = a.collected.by_token(token)
    return c


class TestGetPut:
    def test_zero_length_get(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        local = bytearray(b"keep")
        c = _transfer(a, b, a.get, b.address, 12345, 0, local, 0)
        assert c.status is Status.OK and c.op_kind is OpKind.GET
        assert local == b"keep"

    def test_get_64_mib(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        src = bytearray(range(256)) * (1 << 18)
        assert len(src) == 64 << 20
        key = b.mem_expose(src, Permission.READ)
        dst = bytearray(len(src))
        c = _transfer(a, b, a.get, b.address, key, 0, dst, len(src))
        assert c.status is Status.OK
        assert wire.checksum(dst) == wire.checksum(src)

    def test_get_window(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        src = bytes(range(100))
        key = b.mem_expose(src, Permission.READ)
        dst = bytearray(20)
        assert _transfer(a, b, a.get, b.address, key, 30, dst, 20).status is Status.OK
        assert dst == src[30:50]

    def test_get_out_of_range(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        key = b.mem_expose(bytearray(100))
        c = _transfer(a, b, a.get, b.address, key, 90, bytearray(20), 20)
        assert c.status is Status.REMOTE_ERROR

    def test_get_needs_read(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        key = b.mem_expose(bytearray(10), Permission.WRITE)
        assert _transfer(a, b, a.get, b.address, key, 0, bytearray(10), 10).status \
            is Status.REMOTE_ERROR

    def test_local_too_small(self, make_endpoint):
        a = make_endpoint()
        with pytest.raises(ValueError):
            a.get(a.address, 1, 0, bytearray(4), 8)

    def test_put_read_back(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        target = bytearray(1000)
        key = b.mem_expose(target, Permission.READWRITE)
        data = bytes(i % 251 for i in range(600))
        assert _transfer(a, b, a.put, b.address, key, 100, data, 600).status is Status.OK
        assert target[100:700] == data
        back = bytearray(600)
        assert _transfer(a, b, a.get, b.address, key, 100, back, 600).status is Status.OK
        assert back == data

    def test_put_large(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        target = bytearray(3 << 20)
        key = b.mem_expose(target, Permission.WRITE)
        data = bytes(range(256)) * (len(target) // 256)
        assert _transfer(a, b, a.put, b.address, key, 0, data, len(data)).status is Status.OK
        assert target == data

    def test_put_read_only(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        target = bytearray(10)
        key = b.mem_expose(target, Permission.READ)
        assert _transfer(a, b, a.put, b.address, key, 0, b"x" * 10, 10).status \
            is Status.REMOTE_ERROR
        assert target == bytes(10)

    def test_zero_length_put(self, make_endpoint):
        a, b = make_endpoint(), make_endpoint()
        assert _transfer(a, b, a.put, b.address, 999, 0, b"", 0).status is Status.OK


class TestCancel:
    def test_cancel_get_to_stalled_peer(self, make_endpoint, transport):
        a = make_endpoint()
        with stalled_peer(transport, make_endpoint) as peer:
            token = a.get(_addr(peer), 1, 0, bytearray(16), 16)
            a.progress(0.05)
            assert not a.collected.by_token(token)
            a.cancel(token)
            pump([a], lambda: a.collected.by_token(token), timeout=2)
            (c,) = a.collected.by_token(token)
            assert c.status is Status.CANCELED

    def test_cancel_after_completion(self, make_endpoint):
        a = make_endpoint()
        token = a.send_unexpected(a.address, frame())
        pump([a], lambda: a.collected.by_token(token))
        with pytest.raises(NbrpcError) as e:
            a.cancel(token)
        assert e.value.code is ErrorCode.UNKNOWN_TOKEN

    def test_double_cancel(self, make_endpoint, transport):
        a = make_endpoint()
        with stalled_peer(transport, make_endpoint) as peer:
            token = a.get(_addr(peer), 1, 0, bytearray(16), 16)
            a.cancel(token)
            with pytest.raises(NbrpcError) as e:
                a.cancel(token)
            assert e.value.code is ErrorCode.UNKNOWN_TOKEN
            pump([a], lambda: a.collected.by_token(token))
            assert len(a.collected.by_token(token)) == 1


def test_one_completion_per_initiation(make_endpoint):
    a, b = make_endpoint(), make_endpoint()
    key = b.mem_expose(bytearray(1024))
    tokens = []
    for i in range(50):
        tokens.append(a.send_unexpected(b.address, frame(cookie=i)))
        tokens.append(a.get(b.address, key, i, bytearray(8), 8))
        tokens.append(a.put(b.address, key, i, b"12345678", 8))
        tokens.append(a.get(b.address, key + 100, 0, bytearray(8), 8))
    pump([a, b], lambda: len(a.collected.items) >= len(tokens))
    b.progress(0.01)
    a.progress(0.01)
    assert sorted(c.token for c in a.collected.items) == sorted(tokens)
    assert a.stats["initiated"] == a.stats["completed"] == len(tokens)
    assert a.pending == 0
