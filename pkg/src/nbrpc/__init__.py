"""Nonblocking RPC with a separate one-sided bulk data path.

Small arguments travel inline in metadata messages; large ones are exposed
as bulk handles whose descriptors ride along and are pulled (or pushed) by
the other side. Transports plug in behind a small network abstraction layer.
"""

from . import transport  # noqa: F401  registers the bundled plugins
from .bulk import (PULL, PUSH, BulkHandle, BulkOp, BulkTransfer, Locality, bulk_create,
                   bulk_free, bulk_transfer)
from .errors import ErrorCode, NbrpcError, Status
from .nal import NetAddress, Permission, parse_address
from .rpc import (CompletionEvent, Handle, HandleState, Request, Role, RpcClass, RpcContext,
                  in_trigger, init)
from .wire import DEFAULT_EAGER_LIMIT, HEADER_SIZE, checksum, rpc_id_from_name

__all__ = [
    "PULL", "PUSH", "BulkHandle", "BulkOp", "BulkTransfer", "Locality", "bulk_create",
    "bulk_free", "bulk_transfer", "ErrorCode", "NbrpcError", "Status", "NetAddress",
    "Permission", "parse_address", "CompletionEvent", "Handle", "HandleState", "Request",
    "Role", "RpcClass", "RpcContext", "in_trigger", "init", "DEFAULT_EAGER_LIMIT",
    "HEADER_SIZE", "checksum", "rpc_id_from_name",
]
__version__ = "0.1.0"
