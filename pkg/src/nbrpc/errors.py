import enum


class ErrorCode(str, enum.Enum):
    # wire
    BAD_MAGIC = "BAD_MAGIC"
    SHORT_BUFFER = "SHORT_BUFFER"
    BAD_VERSION = "BAD_VERSION"
    BAD_KIND = "BAD_KIND"
    EMPTY_NAME = "EMPTY_NAME"
    DECODE_OVERRUN = "DECODE_OVERRUN"
    LENGTH_OVERFLOW = "LENGTH_OVERFLOW"
    # nal / transports
    OVERSIZE = "OVERSIZE"
    CLOSED = "CLOSED"
    EMPTY_REGION = "EMPTY_REGION"
    UNKNOWN_TOKEN = "UNKNOWN_TOKEN"
    BAD_URI = "BAD_URI"
    UNKNOWN_PLUGIN = "UNKNOWN_PLUGIN"
    ADDRESS_IN_USE = "ADDRESS_IN_USE"
    BIND_FAILED = "BIND_FAILED"
    BAD_FRAME = "BAD_FRAME"
    # rpc
    ID_COLLISION = "ID_COLLISION"
    INVALID_STATE = "INVALID_STATE"
    CONTEXT_CLOSED = "CONTEXT_CLOSED"
    TIMEOUT = "TIMEOUT"
    # bulk
    DECODE_ERROR = "DECODE_ERROR"
    OUT_OF_RANGE = "OUT_OF_RANGE"
    PERMISSION = "PERMISSION"
    # bench
    CRC_MISMATCH = "CRC_MISMATCH"


class NbrpcError(Exception):
    """Raised synchronously by any API call; ``code`` says which rule was broken."""

    def __init__(self, code, message=""):
        self.code = ErrorCode(code)
        super().__init__(f"{self.code.value}: {message}" if message else self.code.value)


class Status(enum.IntEnum):
    """Outcome carried by asynchronous completions (and on the wire as one byte)."""

    OK = 0
    CANCELED = 1
    TIMEOUT = 2
    NO_SUCH_RPC = 3
    DECODE_ERROR = 4
    TRANSPORT_ERROR = 5
    REMOTE_ERROR = 6
