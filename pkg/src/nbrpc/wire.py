"""Metadata framing, argument procs, RPC ids and checksums.

Frame layout (all integers little-endian)::

    magic[4] | version[1] | kind[1] | flags[1] | pad[1] | rpc_id[4] | cookie[8] | payload_len[4]

followed by ``payload_len`` payload bytes.
"""

import enum
import struct
import zlib
from dataclasses import dataclass

from .errors import ErrorCode, NbrpcError

MAGIC = b"MRPC"
VERSION = 1
DEFAULT_EAGER_LIMIT = 4096

_HEADER = struct.Struct("<4sBBBxIQI")
HEADER_SIZE = _HEADER.size  # 24

FLAG_NO_RESPONSE = 0x01
FLAG_HAS_BULK = 0x02

_U32 = struct.Struct("<I")


class Kind(enum.IntEnum):
    REQUEST = 0
    RESPONSE = 1
    BULK_GET = 2
    BULK_PUT = 3
    BULK_DATA = 4
    BULK_ACK = 5
    ERROR = 6
    # connection handshake used by the tcp transport
    HELLO = 7


METADATA_KINDS = frozenset({Kind.REQUEST, Kind.RESPONSE, Kind.ERROR})


@dataclass(frozen=True)
class MessageHeader:
    kind: Kind
    rpc_id: int = 0
    cookie: int = 0
    flags: int = 0
    payload_len: int = 0
    version: int = VERSION

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", Kind(self.kind))
        except ValueError:
            raise NbrpcError(ErrorCode.BAD_KIND, f"unknown kind {self.kind!r}") from None
        for name, bits in (("version", 8), ("flags", 8), ("rpc_id", 32),
                           ("cookie", 64), ("payload_len", 32)):
            value = getattr(self, name)
            if not 0 <= value < (1 << bits):
                raise ValueError(f"{name}={value} does not fit in {bits} bits")


def encode_header(h: MessageHeader) -> bytes:
    return _HEADER.pack(MAGIC, h.version, h.kind, h.flags, h.rpc_id, h.cookie, h.payload_len)


def decode_header(b) -> MessageHeader:
    if len(b) < HEADER_SIZE:
        raise NbrpcError(ErrorCode.SHORT_BUFFER, f"{len(b)} < {HEADER_SIZE} bytes")
    magic, version, kind, flags, rpc_id, cookie, payload_len = _HEADER.unpack_from(b, 0)
    if magic != MAGIC:
        raise NbrpcError(ErrorCode.BAD_MAGIC, repr(bytes(magic)))
    if version != VERSION:
        raise NbrpcError(ErrorCode.BAD_VERSION, str(version))
    return MessageHeader(kind=kind, rpc_id=rpc_id, cookie=cookie, flags=flags,
                         payload_len=payload_len, version=version)


def encode_frame(h: MessageHeader, payload=b"") -> bytes:
    if h.payload_len != len(payload):
        h = MessageHeader(h.kind, h.rpc_id, h.cookie, h.flags, len(payload), h.version)
    return encode_header(h) + bytes(payload)


def rpc_id_from_name(name: str) -> int:
    """32-bit FNV-1a of the UTF-8 encoded name."""
    if not name:
        raise NbrpcError(ErrorCode.EMPTY_NAME)
    h = 0x811C9DC5
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def checksum(b) -> int:
    return zlib.crc32(b) & 0xFFFFFFFF


class Direction(enum.Enum):
    ENCODE = "encode"
    DECODE = "decode"


class ProcContext:
    """Cursor over a message buffer shared by encoding and decoding procs.

    The same sequence of ``proc_*`` calls that built a buffer in ENCODE
    direction reads it back in DECODE direction. Each proc returns the value
    (the argument when encoding, the decoded value when decoding).
    """

    def __init__(self, direction=Direction.ENCODE, buffer=None):
        self.direction = Direction(direction)
        if self.direction is Direction.ENCODE:
            self.buffer = bytearray() if buffer is None else bytearray(buffer)
            self.position = len(self.buffer)
        else:
            self.buffer = memoryview(b"" if buffer is None else buffer).cast("B")
            self.position = 0

    @classmethod
    def encoder(cls):
        return cls(Direction.ENCODE)

    @classmethod
    def decoder(cls, data):
        return cls(Direction.DECODE, data)

    @property
    def encoding(self):
        return self.direction is Direction.ENCODE

    @property
    def remaining(self):
        return len(self.buffer) - self.position

    def getvalue(self) -> bytes:
        return bytes(self.buffer)

    def _take(self, n):
        if self.remaining < n:
            raise NbrpcError(ErrorCode.DECODE_OVERRUN,
                             f"need {n} bytes, {self.remaining} remain")
        start = self.position
        self.position += n
        return self.buffer[start:self.position]

    def _put(self, data):
        self.buffer += data
        self.position = len(self.buffer)


def _proc_struct(fmt):
    st = struct.Struct(fmt)

    def proc(ctx: ProcContext, v=0):
        if ctx.encoding:
            ctx._put(st.pack(v))
            return v
        return st.unpack(ctx._take(st.size))[0]

    return proc


proc_uint8 = _proc_struct("<B")
proc_uint32 = _proc_struct("<I")
proc_uint64 = _proc_struct("<Q")
proc_int64 = _proc_struct("<q")
proc_float64 = _proc_struct("<d")


def proc_bytes(ctx: ProcContext, v=b"") -> bytes:
    """u32 length prefix followed by the raw bytes."""
    if ctx.encoding:
        if len(v) > 0xFFFFFFFF:
            raise NbrpcError(ErrorCode.LENGTH_OVERFLOW, "length does not fit in u32")
        ctx._put(_U32.pack(len(v)))
        ctx._put(v)
        return v
    n = _U32.unpack(ctx._take(4))[0]
    if n > ctx.remaining:
        raise NbrpcError(ErrorCode.LENGTH_OVERFLOW,
                         f"declared {n} bytes, {ctx.remaining} remain")
    return bytes(ctx._take(n))


def proc_string(ctx: ProcContext, v="") -> str:
    if ctx.encoding:
        proc_bytes(ctx, v.encode("utf-8"))
        return v
    return proc_bytes(ctx).decode("utf-8")
