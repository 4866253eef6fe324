"""Origin/target RPC layer on top of a NAL endpoint.

An :class:`RpcClass` owns one endpoint and the table of registered RPCs. Any
number of :class:`RpcContext` objects can be created from it; each has its own
completion queue. Work is driven by two calls:

* ``progress`` moves network activity forward and turns finished operations
  and inbound requests into :class:`CompletionEvent` entries on the queue;
* ``trigger`` pops events in FIFO order and runs their callbacks on the
  calling thread.

User code (completion callbacks and registered handlers) only ever runs
inside ``trigger``.
"""

import enum
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Optional

from . import nal, wire
from .errors import ErrorCode, NbrpcError, Status
from .wire import Kind

log = logging.getLogger(__name__)

_tls = threading.local()


def in_trigger() -> bool:
    """True while the current thread is executing a callback from ``trigger``."""
    return getattr(_tls, "depth", 0) > 0


class Role(enum.Enum):
    ORIGIN = "origin"
    TARGET = "target"


class HandleState(enum.Enum):
    CREATED = "created"
    FORWARDED = "forwarded"
    COMPLETED = "completed"
    CANCELED = "canceled"
    RECEIVED = "received"
    RESPONDED = "responded"


@dataclass
class CompletionEvent:
    callback: Callable
    arg: Any
    status: Status
    handle: Any = None


@dataclass
class _Registration:
    name: str
    handler: Optional[Callable]
    response_expected: bool


def encode_request(input_payload=b"", bulk=b""):
    """REQUEST payload: input_len[4] input bulk_len[4] bulk."""
    ctx = wire.ProcContext.encoder()
    wire.proc_bytes(ctx, input_payload)
    wire.proc_bytes(ctx, bulk)
    return ctx.getvalue()


def decode_request(payload):
    ctx = wire.ProcContext.decoder(payload)
    data = wire.proc_bytes(ctx)
    bulk = wire.proc_bytes(ctx)
    if ctx.remaining:
        raise NbrpcError(ErrorCode.DECODE_ERROR, f"{ctx.remaining} trailing bytes")
    return data, bulk


class RpcClass:
    def __init__(self, endpoint: nal.Endpoint):
        self.endpoint = endpoint
        endpoint.sink = self._on_nal_completion
        self._lock = threading.RLock()
        self._registry = {}
        self._inflight = {}
        self._cookies = itertools.count(1)
        self._contexts = []
        self.closed = False
        self.stats = {"dropped_responses": 0, "bad_frames": 0, "requests": 0}

    def __repr__(self):
        return f"<RpcClass {self.address}>"

    @property
    def address(self) -> nal.NetAddress:
        return self.endpoint.address

    @property
    def eager_limit(self):
        return self.endpoint.eager_limit

    def register(self, name, handler=None, response_expected=True) -> int:
        """Map ``name`` to ``handler(handle)``; returns the RPC id.

        Origins register the names they call too (with ``handler=None``) so
        that ``response_expected`` is known when forwarding.
        """
        rpc_id = wire.rpc_id_from_name(name)
        with self._lock:
            current = self._registry.get(rpc_id)
            if current is not None and current.name != name:
                raise NbrpcError(ErrorCode.ID_COLLISION,
                                 f"{name!r} and {current.name!r} both hash to {rpc_id:#010x}")
            self._registry[rpc_id] = _Registration(name, handler, bool(response_expected))
        return rpc_id

    def registered(self, name) -> bool:
        try:
            rpc_id = wire.rpc_id_from_name(name)
        except NbrpcError:
            return False
        with self._lock:
            reg = self._registry.get(rpc_id)
        return reg is not None and reg.name == name

    def _lookup(self, rpc_id):
        with self._lock:
            return self._registry.get(rpc_id)

    def context(self) -> "RpcContext":
        ctx = RpcContext(self)
        with self._lock:
            self._contexts.append(ctx)
        return ctx

    def close(self):
        with self._lock:
            if self.closed:
                return
            self.closed = True
            contexts = list(self._contexts)
        self.endpoint.close()
        for ctx in contexts:
            ctx.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _next_cookie(self):
        with self._lock:
            return next(self._cookies)

    def _on_nal_completion(self, completion):
        if callable(completion.tag):
            completion.tag(completion)


def init(listen_uri=None, *, plugin=None, eager_limit=wire.DEFAULT_EAGER_LIMIT) -> RpcClass:
    """Create an RPC class.

    With ``listen_uri`` the class is addressable there; otherwise an
    anonymous endpoint of ``plugin`` is opened, which can originate calls and
    receive their responses but cannot be called.
    """
    if listen_uri is not None:
        ep = nal.listen(listen_uri, eager_limit=eager_limit)
    else:
        if plugin is None:
            raise ValueError("either listen_uri or plugin is required")
        ep = nal.anonymous(plugin, eager_limit=eager_limit)
    return RpcClass(ep)


class RpcContext:
    def __init__(self, rpc_class: RpcClass):
        self.rpc_class = rpc_class
        self._queue = deque()
        self._qlock = threading.Lock()
        self._enqueued = 0
        self.closed = False

    def __repr__(self):
        return f"<RpcContext {self.rpc_class.address} queued={len(self._queue)}>"

    @property
    def inflight(self) -> int:
        """Number of origin calls of this context still awaiting completion."""
        cls = self.rpc_class
        with cls._lock:
            return sum(1 for h in cls._inflight.values() if h.context is self)

    @property
    def queued(self) -> int:
        with self._qlock:
            return len(self._queue)

    def _check(self):
        if self.closed or self.rpc_class.closed:
            raise NbrpcError(ErrorCode.CONTEXT_CLOSED)

    def _enqueue(self, event):
        with self._qlock:
            self._queue.append(event)
            self._enqueued += 1

    def create(self, dest, rpc_id) -> "Handle":
        self._check()
        if isinstance(rpc_id, str):
            rpc_id = wire.rpc_id_from_name(rpc_id)
        return Handle(self, Role.ORIGIN, nal.parse_address(dest), rpc_id)

    def close(self):
        self.closed = True

    # -- progress / trigger -------------------------------------------------

    def progress(self, timeout=0.0) -> int:
        """Drive the network; returns how many events this call queued here."""
        self._check()
        before = self._enqueued
        ep = self.rpc_class.endpoint
        try:
            ep.progress(timeout)
            while True:
                item = ep.recv_unexpected()
                if item is None:
                    break
                self._on_message(*item)
        except NbrpcError as e:
            if e.code is ErrorCode.CLOSED:
                raise NbrpcError(ErrorCode.CONTEXT_CLOSED) from None
            raise
        return self._enqueued - before

    def trigger(self, max_count=1) -> int:
        """Run up to ``max_count`` queued callbacks on this thread, FIFO."""
        self._check()
        done = 0
        while done < max_count:
            with self._qlock:
                if not self._queue:
                    break
                event = self._queue.popleft()
            _tls.depth = getattr(_tls, "depth", 0) + 1
            try:
                event.callback(event)
            finally:
                _tls.depth -= 1
            done += 1
        return done

    def _on_message(self, source, frame):
        cls = self.rpc_class
        try:
            h = wire.decode_header(frame)
        except NbrpcError:
            cls.stats["bad_frames"] += 1
            return
        payload = memoryview(frame)[wire.HEADER_SIZE:]
        if h.kind is Kind.REQUEST:
            self._on_request(source, h, payload)
        elif h.kind in (Kind.RESPONSE, Kind.ERROR):
            with cls._lock:
                handle = cls._inflight.get(h.cookie)
            if handle is None:
                cls.stats["dropped_responses"] += 1
                return
            if h.kind is Kind.RESPONSE:
                handle._finish(Status.OK, bytes(payload))
            else:
                try:
                    status = Status(payload[0]) if len(payload) == 1 else Status.DECODE_ERROR
                except ValueError:
                    status = Status.REMOTE_ERROR
                handle._finish(status)
        else:
            cls.stats["bad_frames"] += 1

    def _on_request(self, source, h, payload):
        cls = self.rpc_class
        cls.stats["requests"] += 1
        wants_reply = not h.flags & wire.FLAG_NO_RESPONSE
        try:
            data, bulk = decode_request(payload)
        except NbrpcError:
            if wants_reply:
                self._send_error(source, h, Status.DECODE_ERROR)
            return
        reg = cls._lookup(h.rpc_id)
        if reg is None or reg.handler is None:
            if wants_reply:
                self._send_error(source, h, Status.NO_SUCH_RPC)
            return
        handle = Handle(self, Role.TARGET, source, h.rpc_id)
        handle.cookie = h.cookie
        handle.state = HandleState.RECEIVED
        handle.response_expected = wants_reply
        handle._input = data
        handle._bulk = bulk if h.flags & wire.FLAG_HAS_BULK else None
        self._enqueue(CompletionEvent(_run_handler, reg.handler, Status.OK, handle))

    def _send_error(self, dest, h, status):
        frame = wire.encode_frame(wire.MessageHeader(Kind.ERROR, h.rpc_id, h.cookie),
                                  bytes([status]))
        try:
            self.rpc_class.endpoint.send_unexpected(dest, frame)
        except NbrpcError as e:
            log.debug("could not report %s to %s: %s", status.name, dest, e)

    # -- request shim ---------------------------------------------------------

    def post(self, dest, rpc_id, payload=b"", bulk=None) -> "Request":
        handle = self.create(dest, rpc_id)
        req = Request(handle)
        handle.forward(req._on_complete, payload, bulk=bulk)
        return req

    def wait_until(self, predicate, timeout=None, poll=0.05):
        """Loop progress/trigger until ``predicate()`` holds; False on timeout."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            self.trigger(1 << 30)
            if predicate():
                return True
            remaining = poll if deadline is None else min(poll, deadline - time.monotonic())
            if remaining <= 0:
                self.progress(0)
                self.trigger(1 << 30)
                return predicate()
            self.progress(remaining)


def _run_handler(event):
    event.arg(event.handle)


class Handle:
    """State of one call, on either side.

    Origin handles go CREATED -> FORWARDED -> COMPLETED | CANCELED; target
    handles go RECEIVED -> RESPONDED. Handles are not reusable.
    """

    def __init__(self, context, role, peer, rpc_id):
        self.context = context
        self.role = role
        self.peer = peer
        self.rpc_id = rpc_id
        self.state = HandleState.CREATED
        self.cookie = None
        self.status = None
        self.response_expected = True
        self._input = b""
        self._output = None
        self._bulk = None
        self._callback = None
        self._arg = None
        self._send_token = None

    def __repr__(self):
        return (f"<Handle {self.role.value} {self.state.value} id={self.rpc_id:#010x} "
                f"cookie={self.cookie} peer={self.peer}>")

    @property
    def rpc_class(self):
        return self.context.rpc_class

    # origin side

    def forward(self, callback, payload=b"", bulk=None, arg=None):
        """Send the request; ``callback(event)`` later runs from trigger."""
        cls = self.rpc_class
        self.context._check()
        if self.role is not Role.ORIGIN or self.state is not HandleState.CREATED:
            raise NbrpcError(ErrorCode.INVALID_STATE, f"forward on {self!r}")
        if bulk is not None and not isinstance(bulk, (bytes, bytearray, memoryview)):
            bulk = bulk.serialize()
        body = encode_request(bytes(payload), b"" if bulk is None else bytes(bulk))
        if len(body) > cls.eager_limit:
            raise NbrpcError(ErrorCode.OVERSIZE,
                             f"request payload {len(body)} > eager limit {cls.eager_limit}; "
                             "move large arguments to a bulk handle")
        reg = cls._lookup(self.rpc_id)
        self.response_expected = reg is None or reg.response_expected
        flags = 0 if self.response_expected else wire.FLAG_NO_RESPONSE
        if bulk is not None:
            flags |= wire.FLAG_HAS_BULK
        cookie = cls._next_cookie()
        frame = wire.encode_frame(wire.MessageHeader(Kind.REQUEST, self.rpc_id, cookie, flags),
                                  body)
        with cls._lock:
            self.cookie = cookie
            self.state = HandleState.FORWARDED
            self._callback = callback
            self._arg = arg
            cls._inflight[cookie] = self
        try:
            self._send_token = cls.endpoint.send_unexpected(self.peer, frame, tag=self._on_sent)
        except NbrpcError:
            with cls._lock:
                cls._inflight.pop(cookie, None)
                self.cookie = None
                self.state = HandleState.CREATED
                self._callback = self._arg = None
            raise

    def _on_sent(self, completion):
        self._send_token = None
        if completion.status is not Status.OK:
            self._finish(completion.status)
        elif not self.response_expected:
            self._finish(Status.OK, b"")

    def _finish(self, status, output=None) -> bool:
        cls = self.rpc_class
        with cls._lock:
            if cls._inflight.get(self.cookie) is not self:
                return False
            del cls._inflight[self.cookie]
            self.status = status
            self._output = output
            self.state = (HandleState.CANCELED if status is Status.CANCELED
                          else HandleState.COMPLETED)
        if self._callback is not None:
            self.context._enqueue(CompletionEvent(self._callback, self._arg, status, self))
        return True

    def cancel(self):
        cls = self.rpc_class
        with cls._lock:
            if self.role is not Role.ORIGIN or self.state is not HandleState.FORWARDED:
                raise NbrpcError(ErrorCode.INVALID_STATE, f"cancel on {self!r}")
            token = self._send_token
            self._finish(Status.CANCELED)
        if token is not None:
            try:
                cls.endpoint.cancel(token)
            except NbrpcError:
                pass

    def get_output(self) -> bytes:
        if (self.role is not Role.ORIGIN or self.state is not HandleState.COMPLETED
                or self.status is not Status.OK):
            raise NbrpcError(ErrorCode.INVALID_STATE, f"get_output on {self!r}")
        return self._output

    # target side

    def get_input(self) -> bytes:
        if self.role is not Role.TARGET or self.state is not HandleState.RECEIVED:
            raise NbrpcError(ErrorCode.INVALID_STATE, f"get_input on {self!r}")
        return self._input

    @property
    def bulk(self) -> Optional[bytes]:
        """Serialized bulk descriptor attached by the origin, if any."""
        return self._bulk

    def respond(self, callback=None, payload=b"", arg=None):
        cls = self.rpc_class
        if self.role is not Role.TARGET or self.state is not HandleState.RECEIVED:
            raise NbrpcError(ErrorCode.INVALID_STATE, f"respond on {self!r}")
        if not self.response_expected:
            raise NbrpcError(ErrorCode.INVALID_STATE, "origin does not expect a response")
        payload = bytes(payload)
        if len(payload) > cls.eager_limit:
            raise NbrpcError(ErrorCode.OVERSIZE,
                             f"response payload {len(payload)} > eager limit {cls.eager_limit}")
        frame = wire.encode_frame(wire.MessageHeader(Kind.RESPONSE, self.rpc_id, self.cookie),
                                  payload)
        ctx = self.context

        def sent(completion):
            if callback is not None:
                ctx._enqueue(CompletionEvent(callback, arg, completion.status, self))

        self.state = HandleState.RESPONDED
        try:
            cls.endpoint.send_unexpected(self.peer, frame, tag=sent)
        except NbrpcError:
            self.state = HandleState.RECEIVED
            raise


class Request:
    """post/test/wait view of a single origin call."""

    def __init__(self, handle: Handle):
        self.handle = handle
        self.completed = False
        self.status = None
        self.output = None

    def __repr__(self):
        return f"<Request completed={self.completed} status={self.status}>"

    def _on_complete(self, event):
        self.status = event.status
        if event.status is Status.OK:
            self.output = event.handle.get_output()
        self.completed = True

    def test(self) -> bool:
        """One nonblocking progress/trigger pass, then report completion."""
        if not self.completed:
            ctx = self.handle.context
            ctx.progress(0)
            ctx.trigger(1 << 30)
        return self.completed

    def wait(self, timeout=None) -> Status:
        """Drive the context until this request completes.

        Raises TIMEOUT if it has not completed within ``timeout`` seconds; the
        request stays live and can still be waited on or tested later.
        """
        if not self.handle.context.wait_until(lambda: self.completed, timeout):
            raise NbrpcError(ErrorCode.TIMEOUT, f"request not completed after {timeout}s")
        return self.status

    def cancel(self):
        self.handle.cancel()

