"""Bulk data path: memory descriptors that travel in RPC metadata and the
one-sided transfers that use them.

A :class:`BulkHandle` describes an ordered list of exposed memory segments.
Logical offsets address the concatenation of those segments. The serialized
descriptor is small and fixed per segment, so it fits in a metadata message
whatever the amount of data it describes::

    owner_len[4] owner(utf-8) perm[1] segment_count[4] (key[8] length[8])*
"""

import enum
import threading
from dataclasses import dataclass, field

from . import nal, wire
from .errors import ErrorCode, NbrpcError, Status
from .nal import Permission
from .rpc import CompletionEvent


class Locality(enum.Enum):
    LOCAL = "local"
    REMOTE = "remote"


class BulkOp(enum.Enum):
    PULL = "pull"
    PUSH = "push"


PULL = BulkOp.PULL
PUSH = BulkOp.PUSH


@dataclass(eq=False)
class BulkHandle:
    owner: nal.NetAddress
    segments: tuple
    permission: Permission
    locality: Locality
    _views: list = field(default_factory=list, repr=False)
    _endpoint: object = field(default=None, repr=False)
    freed: bool = False

    @property
    def total_size(self) -> int:
        return sum(length for _, length in self.segments)

    def locate(self, offset):
        """Map a logical offset to ``(segment_index, offset_in_segment)``."""
        if not 0 <= offset < self.total_size:
            raise NbrpcError(ErrorCode.OUT_OF_RANGE, f"offset {offset} of {self.total_size}")
        for i, (_, length) in enumerate(self.segments):
            if offset < length:
                return i, offset
            offset -= length
        raise AssertionError("unreachable")

    def serialize(self) -> bytes:
        if self.locality is not Locality.LOCAL:
            raise NbrpcError(ErrorCode.INVALID_STATE, "only local handles can be serialized")
        ctx = wire.ProcContext.encoder()
        wire.proc_string(ctx, self.owner.canonical)
        wire.proc_uint8(ctx, int(self.permission))
        wire.proc_uint32(ctx, len(self.segments))
        for key, length in self.segments:
            wire.proc_uint64(ctx, key)
            wire.proc_uint64(ctx, length)
        return ctx.getvalue()

    @classmethod
    def deserialize(cls, data) -> "BulkHandle":
        ctx = wire.ProcContext.decoder(data)
        try:
            owner = nal.parse_address(wire.proc_string(ctx))
            perm = wire.proc_uint8(ctx)
            if perm not in (1, 2, 3):
                raise NbrpcError(ErrorCode.DECODE_ERROR, f"bad permission {perm}")
            count = wire.proc_uint32(ctx)
            if count * 16 != ctx.remaining:
                raise NbrpcError(ErrorCode.DECODE_ERROR,
                                 f"{count} segments but {ctx.remaining} bytes remain")
            segments = tuple((wire.proc_uint64(ctx), wire.proc_uint64(ctx)) for _ in range(count))
        except (NbrpcError, UnicodeDecodeError) as e:
            if isinstance(e, NbrpcError) and e.code is ErrorCode.DECODE_ERROR:
                raise
            raise NbrpcError(ErrorCode.DECODE_ERROR, str(e)) from None
        return cls(owner, segments, Permission(perm), Locality.REMOTE)

    def free(self):
        bulk_free(self)


def bulk_create(rpc_class, regions, perm=Permission.READWRITE) -> BulkHandle:
    """Expose ``regions`` (buffers, in order) and describe them as one handle."""
    regions = list(regions)
    if not regions:
        raise NbrpcError(ErrorCode.EMPTY_REGION, "no regions")
    ep = rpc_class.endpoint
    perm = Permission(perm)
    views, segments = [], []
    try:
        for region in regions:
            view = nal.as_region(region, perm)
            key = ep.mem_expose(view, perm)
            views.append(view)
            segments.append((key, view.nbytes))
    except Exception:
        for key, _ in segments:
            ep.mem_unexpose(key)
        raise
    return BulkHandle(ep.address, tuple(segments), perm, Locality.LOCAL, views, ep)


def bulk_free(handle: BulkHandle):
    if handle.locality is not Locality.LOCAL or handle.freed:
        raise NbrpcError(ErrorCode.INVALID_STATE, "free needs a live local handle")
    handle.freed = True
    for key, _ in handle.segments:
        handle._endpoint.mem_unexpose(key)


def split_window(remote_segments, remote_offset, local_segments, local_offset, length):
    """Cut a logical window into pieces that each lie inside one remote and
    one local segment.

    Yields ``(remote_index, remote_seg_offset, local_index, local_seg_offset, n)``.
    """
    def cursor(segments, offset):
        i = 0
        while i < len(segments) and offset >= segments[i]:
            offset -= segments[i]
            i += 1
        return i, offset

    ri, ro = cursor(remote_segments, remote_offset)
    li, lo = cursor(local_segments, local_offset)
    left = length
    while left > 0:
        n = min(left, remote_segments[ri] - ro, local_segments[li] - lo)
        yield ri, ro, li, lo, n
        left -= n
        ro += n
        lo += n
        if ro == remote_segments[ri]:
            ri, ro = ri + 1, 0
        if lo == local_segments[li]:
            li, lo = li + 1, 0


class BulkTransfer:
    """Aggregates the per-segment NAL operations of one transfer.

    The callback fires once, after every piece has finished, with OK only if
    all pieces were OK; otherwise with the first error seen.
    """

    def __init__(self, ctx, callback, arg, pieces):
        self.context = ctx
        self.callback = callback
        self.arg = arg
        self.status = Status.OK
        self.completed = False
        self._remaining = pieces
        self._tokens = []
        self._lock = threading.Lock()

    def __repr__(self):
        return f"<BulkTransfer remaining={self._remaining} status={self.status.name}>"

    def _piece_done(self, completion):
        self._account(completion.status)

    def _account(self, status, count=1):
        cancel = []
        with self._lock:
            self._remaining -= count
            if status is not Status.OK and self.status is Status.OK:
                self.status = status
                cancel = list(self._tokens)
            fire = self._remaining == 0 and not self.completed
            if fire:
                self.completed = True
        ep = self.context.rpc_class.endpoint
        for token in cancel:
            try:
                ep.cancel(token)
            except NbrpcError:
                pass
        if fire and self.callback is not None:
            self.context._enqueue(CompletionEvent(self.callback, self.arg, self.status, self))


def bulk_transfer(ctx, op, remote: BulkHandle, remote_offset, local: BulkHandle, local_offset,
                  length, callback=None, arg=None) -> BulkTransfer:
    """Start moving ``length`` bytes between a remote and a local handle.

    PULL copies remote -> local (nal get), PUSH copies local -> remote (nal put).
    """
    ctx._check()
    op = BulkOp(op)
    if local.locality is not Locality.LOCAL or local.freed:
        raise NbrpcError(ErrorCode.INVALID_STATE, "local side must be a live local handle")
    if length < 0 or remote_offset < 0 or local_offset < 0:
        raise NbrpcError(ErrorCode.OUT_OF_RANGE, "negative offset or length")
    if remote_offset + length > remote.total_size or local_offset + length > local.total_size:
        raise NbrpcError(ErrorCode.OUT_OF_RANGE,
                         f"window [{remote_offset}, +{length}) / [{local_offset}, +{length}) "
                         f"exceeds {remote.total_size} / {local.total_size} bytes")
    need_remote, need_local = ((Permission.READ, Permission.WRITE) if op is BulkOp.PULL
                               else (Permission.WRITE, Permission.READ))
    if not remote.permission & need_remote:
        raise NbrpcError(ErrorCode.PERMISSION, f"{op.name} needs {need_remote.name} on remote")
    if not local.permission & need_local:
        raise NbrpcError(ErrorCode.PERMISSION, f"{op.name} needs {need_local.name} on local")

    pieces = list(split_window([n for _, n in remote.segments], remote_offset,
                               [n for _, n in local.segments], local_offset, length))
    xfer = BulkTransfer(ctx, callback, arg, max(len(pieces), 1))
    if not pieces:
        xfer._account(Status.OK)
        return xfer
    ep = ctx.rpc_class.endpoint
    nal_op = ep.get if op is BulkOp.PULL else ep.put
    for issued, (ri, ro, li, lo, n) in enumerate(pieces):
        key = remote.segments[ri][0]
        window = local._views[li][lo:lo + n]
        try:
            token = nal_op(remote.owner, key, ro, window, n, tag=xfer._piece_done)
        except NbrpcError:
            xfer._account(Status.TRANSPORT_ERROR, len(pieces) - issued)
            break
        with xfer._lock:
            xfer._tokens.append(token)
            failed = xfer.status is not Status.OK
        if failed:
            if issued + 1 < len(pieces):
                xfer._account(Status.CANCELED, len(pieces) - issued - 1)
            try:
                ep.cancel(token)
            except NbrpcError:
                pass
            break
    return xfer
