"""Network abstraction layer: the contract every transport plugin implements.

A plugin endpoint exposes exactly nine operations::

    send_unexpected  recv_unexpected  mem_expose  mem_unexpose
    get  put  progress  cancel  close

Asynchronous operations return a token immediately; their outcome is a
:class:`NalCompletion` handed to the endpoint's ``sink`` from inside
``progress``. Messages passed to ``send_unexpected`` are complete metadata
frames (header and payload, see :mod:`nbrpc.wire`).
"""

import enum
import itertools
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import wire
from .errors import ErrorCode, NbrpcError, Status

CONTRACT_OPERATIONS = frozenset({
    "send_unexpected", "recv_unexpected", "mem_expose", "mem_unexpose",
    "get", "put", "progress", "cancel", "close",
})

DEFAULT_UNEXPECTED_CAPACITY = 1024


class Permission(enum.IntFlag):
    READ = 1
    WRITE = 2
    READWRITE = 3


class OpKind(enum.Enum):
    SEND = "send"
    RECV_UNEXPECTED = "recv_unexpected"
    GET = "get"
    PUT = "put"


@dataclass(frozen=True)
class NetAddress:
    plugin: str
    locator: str

    @property
    def canonical(self) -> str:
        return f"{self.plugin}://{self.locator}"

    def __str__(self):
        return self.canonical


@dataclass
class NalCompletion:
    op_kind: OpKind
    status: Status
    tag: Any = None
    token: int = 0
    source: Optional[NetAddress] = None
    payload: bytes = b""


_URI_RE = re.compile(r"^([a-z][a-z0-9_+.-]*)://(.+)$")

_plugins = {}
_plugins_lock = threading.Lock()


def register_plugin(name, plugin):
    """Make ``plugin`` reachable under ``name://``.

    ``plugin`` must provide ``listen(locator, sink, eager_limit)`` and
    ``anonymous(sink, eager_limit)`` returning an :class:`Endpoint`.
    """
    if not re.fullmatch(r"[a-z][a-z0-9_+.-]*", name):
        raise ValueError(f"plugin names are lowercase ascii: {name!r}")
    with _plugins_lock:
        _plugins[name] = plugin


def unregister_plugin(name):
    with _plugins_lock:
        _plugins.pop(name, None)


def get_plugin(name):
    with _plugins_lock:
        try:
            return _plugins[name]
        except KeyError:
            raise NbrpcError(ErrorCode.UNKNOWN_PLUGIN, name) from None


def registered_plugins():
    with _plugins_lock:
        return sorted(_plugins)


def parse_address(uri) -> NetAddress:
    if isinstance(uri, NetAddress):
        return uri
    m = _URI_RE.match(uri or "")
    if not m:
        raise NbrpcError(ErrorCode.BAD_URI, repr(uri))
    get_plugin(m.group(1))
    return NetAddress(m.group(1), m.group(2))


def as_region(region, perm=Permission.READWRITE) -> memoryview:
    """Byte view over any C-contiguous buffer, never a copy."""
    view = memoryview(region)
    if view.nbytes == 0:
        raise NbrpcError(ErrorCode.EMPTY_REGION)
    if not view.c_contiguous:
        raise ValueError("region must be C-contiguous")
    if view.readonly and perm & Permission.WRITE:
        raise NbrpcError(ErrorCode.PERMISSION, "read-only buffer exposed with WRITE")
    return view.cast("B") if view.format != "B" or view.ndim != 1 else view


@dataclass
class _Exposed:
    view: memoryview
    perm: Permission


@dataclass
class Op:
    """Book-keeping for one initiated asynchronous operation."""
    token: int
    kind: OpKind
    tag: Any
    remote: Optional[NetAddress] = None
    message: bytes = b""
    key: int = 0
    offset: int = 0
    local: Optional[memoryview] = None
    length: int = 0
    extra: dict = field(default_factory=dict)


class Endpoint:
    """State and checks shared by all plugin endpoints.

    Subclasses implement the transport-specific parts of the contract.
    """

    plugin_name = ""

    def __init__(self, address: NetAddress, sink: Optional[Callable] = None,
                 eager_limit=wire.DEFAULT_EAGER_LIMIT,
                 unexpected_capacity=DEFAULT_UNEXPECTED_CAPACITY):
        self.address = address
        self.sink = sink
        self.eager_limit = eager_limit
        self.unexpected_capacity = unexpected_capacity
        self.closed = False
        self._lock = threading.RLock()
        self._regions = {}
        self._keys = itertools.count(1)
        self._tokens = itertools.count(1)
        self._live = {}
        self.stats = {"initiated": 0, "completed": 0, "max_metadata_frame": 0}

    def __repr__(self):
        state = "closed" if self.closed else "open"
        return f"<{type(self).__name__} {self.address.canonical} {state}>"

    # -- helpers for subclasses -------------------------------------------

    def _check_open(self):
        if self.closed:
            raise NbrpcError(ErrorCode.CLOSED, self.address.canonical)

    def _check_message(self, msg):
        """Validate a metadata frame handed to send_unexpected."""
        if len(msg) > self.eager_limit + wire.HEADER_SIZE:
            raise NbrpcError(ErrorCode.OVERSIZE,
                             f"{len(msg)} bytes > eager limit {self.eager_limit} + header")
        h = wire.decode_header(msg)
        if h.kind not in wire.METADATA_KINDS:
            raise NbrpcError(ErrorCode.BAD_FRAME, f"{h.kind.name} is not a metadata kind")
        if h.payload_len != len(msg) - wire.HEADER_SIZE:
            raise NbrpcError(ErrorCode.BAD_FRAME, "payload_len does not match message size")
        return h

    def _note_metadata_frame(self, n):
        if n > self.stats["max_metadata_frame"]:
            self.stats["max_metadata_frame"] = n

    def _new_op(self, kind, tag, **kw) -> Op:
        op = Op(token=next(self._tokens), kind=kind, tag=tag, **kw)
        with self._lock:
            self._live[op.token] = op
            self.stats["initiated"] += 1
        return op

    def _retire(self, token) -> Optional[Op]:
        """Remove a live op; only the caller that gets it back may complete it."""
        with self._lock:
            op = self._live.pop(token, None)
            if op is not None:
                self.stats["completed"] += 1
            return op

    def _deliver(self, completions):
        sink = self.sink
        for c in completions:
            if sink is not None:
                sink(c)
        return len(completions)

    @staticmethod
    def _completion(op, status):
        return NalCompletion(op.kind, Status(status), tag=op.tag, token=op.token,
                             source=op.remote)

    def lookup_region(self, key, offset, length, need: Permission):
        """Resolve a remote access against this endpoint's exposed regions.

        Returns the target slice or None when the access must be refused
        (unknown key, range or permission violation).
        """
        with self._lock:
            ex = self._regions.get(key)
        if ex is None or not ex.perm & need:
            return None
        if offset < 0 or length < 0 or offset + length > ex.view.nbytes:
            return None
        return ex.view[offset:offset + length]

    @property
    def pending(self):
        with self._lock:
            return len(self._live)

    # -- contract operations implemented here ----------------------------

    def mem_expose(self, region, perm=Permission.READWRITE) -> int:
        self._check_open()
        perm = Permission(perm)
        view = as_region(region, perm)
        with self._lock:
            key = next(self._keys)
            self._regions[key] = _Exposed(view, perm)
        return key

    def mem_unexpose(self, key):
        with self._lock:
            self._regions.pop(key, None)

    def _validate_rma(self, remote, local, length):
        self._check_open()
        if length < 0:
            raise ValueError("negative length")
        local = memoryview(local).cast("B") if local is not None else memoryview(b"")
        if local.nbytes < length:
            raise ValueError(f"local region holds {local.nbytes} < {length} bytes")
        return parse_address(remote), local

    # -- contract operations left to plugins ------------------------------

    def send_unexpected(self, dest, msg, tag=None) -> int:
        raise NotImplementedError

    def recv_unexpected(self):
        raise NotImplementedError

    def get(self, remote, key, remote_offset, local_region, length, tag=None) -> int:
        raise NotImplementedError

    def put(self, remote, key, remote_offset, local_region, length, tag=None) -> int:
        raise NotImplementedError

    def progress(self, timeout=0.0) -> int:
        raise NotImplementedError

    def cancel(self, token):
        raise NotImplementedError

    def close(self):
        raise NotImplementedError


def listen(uri, sink=None, eager_limit=wire.DEFAULT_EAGER_LIMIT) -> Endpoint:
    addr = parse_address(uri)
    return get_plugin(addr.plugin).listen(addr.locator, sink, eager_limit)


def anonymous(plugin, sink=None, eager_limit=wire.DEFAULT_EAGER_LIMIT) -> Endpoint:
    return get_plugin(plugin).anonymous(sink, eager_limit)
