"""TCP plugin (``tcp://host:port``).

One framed connection per peer carries both metadata and bulk traffic. Every
unit on the wire is a :mod:`nbrpc.wire` header followed by its payload. The
dialing side opens with a HELLO frame naming its own canonical address, so
replies and later calls toward that peer reuse the connection.

One-sided access is emulated with control frames, little-endian::

    BULK_GET / BULK_PUT   key[8] offset[8] length[8] transfer_cookie[8]
    BULK_DATA             transfer_cookie[8] chunk_index[4] bytes
    BULK_ACK              transfer_cookie[8] status[1]

A get is answered by the holder with BULK_DATA chunks then one BULK_ACK; a
put streams BULK_DATA after the BULK_PUT and the holder acknowledges. The
holder serves these from its I/O thread, so the remote application never has
to call ``progress`` for its memory to be accessed, as with real RDMA.
"""

import errno
import itertools
import logging
import os
import random
import selectors
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .. import nal, wire
from ..errors import ErrorCode, NbrpcError, Status
from ..nal import OpKind, Permission
from ..wire import Kind

log = logging.getLogger(__name__)

CHUNK_SIZE = 256 * 1024
CLOSE_LINGER = 2.0

_RMA = struct.Struct("<QQQQ")
_DATA = struct.Struct("<QI")
_ACK = struct.Struct("<QB")

_CLOSE = object()
_WAKE = object()
_LISTENER = object()


@dataclass
class TcpFaults:
    """Test-only fault injection.

    close_after_chunks: while serving a get, drop the connection after this
    many BULK_DATA frames have been queued.
    """
    close_after_chunks: Optional[int] = None


def _split_locator(locator):
    host, sep, port = locator.rpartition(":")
    if not sep or not host:
        raise NbrpcError(ErrorCode.BAD_URI, f"tcp locator must be host:port, got {locator!r}")
    try:
        port = int(port)
    except ValueError:
        raise NbrpcError(ErrorCode.BAD_URI, f"bad port in {locator!r}") from None
    if not 0 <= port < 65536:
        raise NbrpcError(ErrorCode.BAD_URI, f"bad port in {locator!r}")
    return host.strip("[]"), port


class _Conn:
    def __init__(self, sock, peer=None, outbound=False):
        self.sock = sock
        self.peer = peer
        self.outbound = outbound
        self.connecting = outbound
        self.out = deque()
        self.rbuf = bytearray()
        self.ops = set()
        self.rx = {}
        self.dead = False
        self.mask = 0

    def __repr__(self):
        return f"<_Conn peer={self.peer} out={len(self.out)} dead={self.dead}>"


class TcpPlugin:
    def listen(self, locator, sink=None, eager_limit=wire.DEFAULT_EAGER_LIMIT):
        host, port = _split_locator(locator)
        try:
            infos = socket.getaddrinfo(host, port, type=socket.SOCK_STREAM)
            family, _, _, _, sockaddr = infos[0]
            lsock = socket.socket(family, socket.SOCK_STREAM)
        except OSError as e:
            raise NbrpcError(ErrorCode.BIND_FAILED, f"{locator}: {e}") from None
        try:
            lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            lsock.bind(sockaddr)
            lsock.listen(128)
        except OSError as e:
            lsock.close()
            raise NbrpcError(ErrorCode.BIND_FAILED, f"{locator}: {e}") from None
        bound_port = lsock.getsockname()[1]
        shown = f"[{host}]" if ":" in host else host
        addr = nal.NetAddress("tcp", f"{shown}:{bound_port}")
        return TcpEndpoint(addr, sink, eager_limit, listener=lsock)

    def anonymous(self, sink=None, eager_limit=wire.DEFAULT_EAGER_LIMIT):
        addr = nal.NetAddress("tcp", f"anon-{os.getpid()}-{random.getrandbits(48):012x}")
        return TcpEndpoint(addr, sink, eager_limit)


class TcpEndpoint(nal.Endpoint):
    plugin_name = "tcp"

    def __init__(self, address, sink=None, eager_limit=wire.DEFAULT_EAGER_LIMIT, listener=None):
        super().__init__(address, sink, eager_limit)
        self.faults = TcpFaults()
        self._cv = threading.Condition(self._lock)
        self._done = deque()
        self._unexpected = deque()
        self._arrivals = 0
        self._cmds = deque()
        self._conns = {}
        self._all = set()
        self._xfers = {}
        self._xcookies = itertools.count(random.getrandbits(62))
        self._stopping = False
        self._sel = selectors.DefaultSelector()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._wake_w.setblocking(False)
        self._sel.register(self._wake_r, selectors.EVENT_READ, _WAKE)
        self._listener = listener
        if listener is not None:
            listener.setblocking(False)
            self._sel.register(listener, selectors.EVENT_READ, _LISTENER)
        self._thread = threading.Thread(target=self._run, name=f"nbrpc-tcp-{address.locator}",
                                        daemon=True)
        self._thread.start()

    # -- contract -----------------------------------------------------------

    def send_unexpected(self, dest, msg, tag=None):
        self._check_open()
        dest = nal.parse_address(dest)
        msg = bytes(msg)
        h = self._check_message(msg)
        if dest.plugin != self.plugin_name:
            raise NbrpcError(ErrorCode.UNKNOWN_PLUGIN, f"tcp endpoint cannot reach {dest}")
        self._note_metadata_frame(len(msg))
        op = self._new_op(OpKind.SEND, tag, remote=dest, message=msg)
        op.extra["kind"] = h.kind
        self._submit(self._io_send, op)
        return op.token

    def recv_unexpected(self):
        with self._lock:
            self._check_open()
            return self._unexpected.popleft() if self._unexpected else None

    def get(self, remote, key, remote_offset, local_region, length, tag=None):
        return self._rma(OpKind.GET, remote, key, remote_offset, local_region, length, tag)

    def put(self, remote, key, remote_offset, local_region, length, tag=None):
        return self._rma(OpKind.PUT, remote, key, remote_offset, local_region, length, tag)

    def _rma(self, kind, remote, key, remote_offset, local_region, length, tag):
        remote, local = self._validate_rma(remote, local_region, length)
        if remote.plugin != self.plugin_name:
            raise NbrpcError(ErrorCode.UNKNOWN_PLUGIN, f"tcp endpoint cannot reach {remote}")
        op = self._new_op(kind, tag, remote=remote, key=key, offset=remote_offset,
                          local=local, length=length)
        if length == 0:
            self._finish(op.token, Status.OK)
        else:
            self._submit(self._io_rma, op)
        return op.token

    def cancel(self, token):
        with self._lock:
            op = self._live.get(token)
            if op is None or op.extra.get("canceled"):
                raise NbrpcError(ErrorCode.UNKNOWN_TOKEN, str(token))
            op.extra["canceled"] = True
        self._finish(token, Status.CANCELED)
        self._submit(self._io_forget, op)

    def progress(self, timeout=0.0):
        deadline = time.monotonic() + max(timeout, 0.0)
        with self._cv:
            while True:
                self._check_open()
                if self._done or self._arrivals:
                    break
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cv.wait(remaining)
            done = list(self._done)
            self._done.clear()
            arrivals, self._arrivals = self._arrivals, 0
        return self._deliver(done) + arrivals

    def close(self):
        with self._lock:
            if self.closed:
                return
            self.closed = True
        self._submit(self._io_stop)
        if threading.current_thread() is not self._thread:
            self._thread.join(CLOSE_LINGER + 5)
        with self._lock:
            done = list(self._done)
            self._done.clear()
            for op in list(self._live.values()):
                if self._retire(op.token) is not None:
                    done.append(self._completion(op, Status.CANCELED))
            self._unexpected.clear()
            self._regions.clear()
            self._cv.notify_all()
        self._deliver(done)

    # -- test hooks -----------------------------------------------------------

    def drop_connections(self):
        """Abort every live connection as if the network failed."""
        self._submit(self._io_drop_all)

    @property
    def connection_count(self):
        return sum(1 for c in list(self._all) if not c.dead)

    # -- plumbing between caller threads and the I/O thread ---------------

    def _submit(self, fn, *args):
        with self._lock:
            self._cmds.append((fn, args))
        try:
            self._wake_w.send(b"x")
        except (BlockingIOError, OSError):
            pass

    def _finish(self, token, status):
        op = self._retire(token)
        if op is None:
            return
        with self._cv:
            self._done.append(self._completion(op, status))
            self._cv.notify_all()

    def _count(self, prefix, kind):
        key = f"{prefix}_{Kind(kind).name}"
        self.stats[key] = self.stats.get(key, 0) + 1

    # -- I/O thread -----------------------------------------------------------

    def _run(self):
        try:
            while not self._stopping:
                self._run_cmds()
                if self._stopping:
                    break
                for key, mask in self._sel.select():
                    obj = key.data
                    if obj is _WAKE:
                        try:
                            while self._wake_r.recv(4096):
                                pass
                        except (BlockingIOError, OSError):
                            pass
                    elif obj is _LISTENER:
                        self._accept()
                    else:
                        if mask & selectors.EVENT_WRITE and not obj.dead:
                            self._on_writable(obj)
                        if mask & selectors.EVENT_READ and not obj.dead:
                            self._on_readable(obj)
        except Exception:
            log.exception("tcp I/O thread crashed on %s", self.address)
            self._io_drop_all()
        finally:
            self._teardown()

    def _run_cmds(self):
        while True:
            with self._lock:
                if not self._cmds:
                    return
                fn, args = self._cmds.popleft()
            try:
                fn(*args)
            except Exception:
                log.exception("tcp command %s failed", getattr(fn, "__name__", fn))

    def _io_stop(self):
        self._stopping = True

    def _teardown(self):
        deadline = time.monotonic() + CLOSE_LINGER
        for conn in list(self._all):
            if conn.dead or conn.connecting:
                continue
            try:
                conn.sock.settimeout(max(deadline - time.monotonic(), 0.01))
                while conn.out:
                    view, token = conn.out.popleft()
                    if view is _CLOSE:
                        break
                    conn.sock.sendall(view)
                    if token is not None:
                        self._finish(token, Status.OK)
            except OSError:
                pass
        for conn in list(self._all):
            self._drop(conn, Status.CANCELED)
        if self._listener is not None:
            self._listener.close()
        for s in (self._wake_r, self._wake_w):
            s.close()
        self._sel.close()

    def _accept(self):
        while True:
            try:
                sock, _ = self._listener.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            sock.setblocking(False)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock)
            self._all.add(conn)
            self._set_mask(conn)

    def _set_mask(self, conn):
        mask = selectors.EVENT_READ
        if conn.out or conn.connecting:
            mask |= selectors.EVENT_WRITE
        if mask == conn.mask:
            return
        if conn.mask == 0:
            self._sel.register(conn.sock, mask, conn)
        else:
            self._sel.modify(conn.sock, mask, conn)
        conn.mask = mask

    def _connection(self, addr):
        conn = self._conns.get(addr.canonical)
        if conn is not None and not conn.dead:
            return conn
        host, port = _split_locator(addr.locator)
        infos = socket.getaddrinfo(host, port, type=socket.SOCK_STREAM)
        family, _, _, _, sockaddr = infos[0]
        sock = socket.socket(family, socket.SOCK_STREAM)
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        err = sock.connect_ex(sockaddr)
        if err not in (0, errno.EINPROGRESS, errno.EWOULDBLOCK):
            sock.close()
            raise OSError(err, os.strerror(err))
        conn = _Conn(sock, peer=addr, outbound=True)
        self._all.add(conn)
        self._conns[addr.canonical] = conn
        self._enqueue(conn, Kind.HELLO, 0, self.address.canonical.encode("utf-8"))
        return conn

    def _enqueue(self, conn, kind, cookie, payload, token=None, extra=None):
        """Queue one frame; ``extra`` is appended without copying."""
        n = len(payload) + (len(extra) if extra is not None else 0)
        header = wire.encode_header(wire.MessageHeader(kind, cookie=cookie, payload_len=n))
        if extra is None:
            conn.out.append([memoryview(header + payload), token])
        else:
            conn.out.append([memoryview(header + payload), None])
            conn.out.append([extra, token])
        self._count("tx", kind)
        self._set_mask(conn)

    def _io_send(self, op):
        if op.token not in self._live:
            return
        try:
            conn = self._connection(op.remote)
        except (OSError, NbrpcError) as e:
            log.debug("send to %s failed: %s", op.remote, e)
            self._finish(op.token, Status.TRANSPORT_ERROR)
            return
        conn.ops.add(op.token)
        conn.out.append([memoryview(op.message), op.token])
        self._count("tx", op.extra["kind"])
        self._set_mask(conn)

    def _io_rma(self, op):
        if op.token not in self._live:
            return
        try:
            conn = self._connection(op.remote)
        except (OSError, NbrpcError) as e:
            log.debug("%s to %s failed: %s", op.kind.name, op.remote, e)
            self._finish(op.token, Status.TRANSPORT_ERROR)
            return
        cookie = next(self._xcookies)
        op.extra.update(cookie=cookie, conn=conn, received=0, next_index=0)
        self._xfers[cookie] = op
        conn.ops.add(op.token)
        body = _RMA.pack(op.key, op.offset, op.length, cookie)
        if op.kind is OpKind.GET:
            self._enqueue(conn, Kind.BULK_GET, cookie, body)
            return
        self._enqueue(conn, Kind.BULK_PUT, cookie, body)
        for index, start in enumerate(range(0, op.length, CHUNK_SIZE)):
            chunk = op.local[start:min(start + CHUNK_SIZE, op.length)]
            self._enqueue(conn, Kind.BULK_DATA, cookie, _DATA.pack(cookie, index), extra=chunk)

    def _io_forget(self, op):
        cookie = op.extra.get("cookie")
        if cookie is not None:
            self._xfers.pop(cookie, None)
        conn = op.extra.get("conn")
        if conn is not None:
            conn.ops.discard(op.token)

    def _io_drop_all(self):
        for conn in list(self._all):
            self._drop(conn, Status.TRANSPORT_ERROR)

    def _drop(self, conn, status=Status.TRANSPORT_ERROR):
        if conn.dead:
            return
        conn.dead = True
        self._all.discard(conn)
        if conn.mask:
            try:
                self._sel.unregister(conn.sock)
            except (KeyError, ValueError):
                pass
        conn.sock.close()
        if conn.peer is not None and self._conns.get(conn.peer.canonical) is conn:
            del self._conns[conn.peer.canonical]
        for token in list(conn.ops):
            op = self._live.get(token)
            if op is not None and "cookie" in op.extra:
                self._xfers.pop(op.extra["cookie"], None)
            self._finish(token, status)
        conn.ops.clear()
        conn.rx.clear()
        conn.out.clear()

    def _on_writable(self, conn):
        if conn.connecting:
            err = conn.sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
            if err:
                log.debug("connect to %s failed: %s", conn.peer, os.strerror(err))
                self._drop(conn)
                return
            conn.connecting = False
        while conn.out:
            entry = conn.out[0]
            view, token = entry
            if view is _CLOSE:
                self._drop(conn)
                return
            try:
                n = conn.sock.send(view)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                self._drop(conn)
                return
            if n < len(view):
                entry[0] = view[n:]
                break
            conn.out.popleft()
            if token is not None:
                conn.ops.discard(token)
                self._finish(token, Status.OK)
        self._set_mask(conn)

    def _on_readable(self, conn):
        try:
            data = conn.sock.recv(1 << 20)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self._drop(conn)
            return
        if not data:
            self._drop(conn)
            return
        buf = conn.rbuf
        buf += data
        pos = 0
        H = wire.HEADER_SIZE
        while len(buf) - pos >= H and not conn.dead:
            try:
                h = wire.decode_header(buf[pos:pos + H])
                self._check_frame(conn, h)
            except NbrpcError as e:
                log.warning("dropping connection from %s: %s", conn.peer, e)
                self.stats["protocol_errors"] = self.stats.get("protocol_errors", 0) + 1
                self._drop(conn)
                return
            end = pos + H + h.payload_len
            if len(buf) < end:
                break
            frame = bytes(buf[pos:end])
            pos = end
            self._count("rx", h.kind)
            self._on_frame(conn, h, frame)
        if not conn.dead:
            del buf[:pos]

    def _check_frame(self, conn, h):
        n = h.payload_len
        if h.kind in wire.METADATA_KINDS:
            ok = n <= self.eager_limit
        elif h.kind is Kind.BULK_DATA:
            ok = _DATA.size <= n <= _DATA.size + CHUNK_SIZE
        elif h.kind in (Kind.BULK_GET, Kind.BULK_PUT):
            ok = n == _RMA.size
        elif h.kind is Kind.BULK_ACK:
            ok = n == _ACK.size
        else:
            ok = n <= 4096 and conn.peer is None and not conn.outbound
        if not ok:
            raise NbrpcError(ErrorCode.BAD_FRAME, f"{h.kind.name} with payload_len {n}")
        if conn.peer is None and h.kind is not Kind.HELLO:
            raise NbrpcError(ErrorCode.BAD_FRAME, "first frame must be HELLO")

    def _on_frame(self, conn, h, frame):
        payload = memoryview(frame)[wire.HEADER_SIZE:]
        kind = h.kind
        if kind in wire.METADATA_KINDS:
            self._note_metadata_frame(len(frame))
            with self._cv:
                if len(self._unexpected) >= self.unexpected_capacity:
                    overflow = True
                else:
                    overflow = False
                    self._unexpected.append((conn.peer, frame))
                    self._arrivals += 1
                    self._cv.notify_all()
            if overflow:
                log.warning("unexpected buffer full, dropping connection from %s", conn.peer)
                self._drop(conn)
        elif kind is Kind.HELLO:
            try:
                peer = nal.parse_address(bytes(payload).decode("utf-8"))
            except (NbrpcError, UnicodeDecodeError):
                peer = None
            if peer is None or peer.plugin != self.plugin_name:
                self._drop(conn)
                return
            conn.peer = peer
            existing = self._conns.get(peer.canonical)
            if existing is None or existing.dead:
                self._conns[peer.canonical] = conn
        elif kind is Kind.BULK_GET:
            self._serve_get(conn, *_RMA.unpack(payload))
        elif kind is Kind.BULK_PUT:
            self._serve_put(conn, *_RMA.unpack(payload))
        elif kind is Kind.BULK_DATA:
            cookie, index = _DATA.unpack_from(payload)
            self._on_data(conn, cookie, index, payload[_DATA.size:])
        elif kind is Kind.BULK_ACK:
            cookie, status = _ACK.unpack(payload)
            self._on_ack(cookie, status)

    # holder side

    def _serve_get(self, conn, key, offset, length, cookie):
        view = self.lookup_region(key, offset, length, Permission.READ)
        if view is None:
            self._enqueue(conn, Kind.BULK_ACK, cookie, _ACK.pack(cookie, Status.REMOTE_ERROR))
            return
        limit = self.faults.close_after_chunks
        for index, start in enumerate(range(0, length, CHUNK_SIZE)):
            if limit is not None and index >= limit:
                conn.out.append([_CLOSE, None])
                self._set_mask(conn)
                return
            self._enqueue(conn, Kind.BULK_DATA, cookie, _DATA.pack(cookie, index),
                          extra=view[start:start + CHUNK_SIZE])
        self._enqueue(conn, Kind.BULK_ACK, cookie, _ACK.pack(cookie, Status.OK))

    def _serve_put(self, conn, key, offset, length, cookie):
        view = self.lookup_region(key, offset, length, Permission.WRITE)
        if view is None:
            self._enqueue(conn, Kind.BULK_ACK, cookie, _ACK.pack(cookie, Status.REMOTE_ERROR))
        if length == 0:
            if view is not None:
                self._enqueue(conn, Kind.BULK_ACK, cookie, _ACK.pack(cookie, Status.OK))
            return
        conn.rx[cookie] = {"view": view, "pos": 0, "index": 0, "length": length}

    def _on_data(self, conn, cookie, index, chunk):
        rx = conn.rx.get(cookie)
        if rx is not None:
            n = len(chunk)
            if index != rx["index"] or rx["pos"] + n > rx["length"]:
                # out of order or past the announced length: the stream is unusable
                self._drop(conn)
                return
            if rx["view"] is not None:
                rx["view"][rx["pos"]:rx["pos"] + n] = chunk
            rx["pos"] += n
            rx["index"] += 1
            if rx["pos"] == rx["length"]:
                del conn.rx[cookie]
                if rx["view"] is not None:
                    self._enqueue(conn, Kind.BULK_ACK, cookie, _ACK.pack(cookie, Status.OK))
            return
        op = self._xfers.get(cookie)
        if op is None or op.kind is not OpKind.GET:
            return
        got, n = op.extra["received"], len(chunk)
        if index != op.extra["next_index"] or got + n > op.length:
            self._xfers.pop(cookie, None)
            conn.ops.discard(op.token)
            self._finish(op.token, Status.TRANSPORT_ERROR)
            return
        if op.token in self._live:
            op.local[got:got + n] = chunk
        op.extra["received"] = got + n
        op.extra["next_index"] = index + 1

    # initiator side

    def _on_ack(self, cookie, status):
        op = self._xfers.pop(cookie, None)
        if op is None:
            return
        op.extra["conn"].ops.discard(op.token)
        try:
            status = Status(status)
        except ValueError:
            status = Status.REMOTE_ERROR
        if status is Status.OK and op.kind is OpKind.GET and op.extra["received"] != op.length:
            status = Status.TRANSPORT_ERROR
        self._finish(op.token, status)


nal.register_plugin("tcp", TcpPlugin())
