"""In-process loopback plugin (``loop://token``).

All endpoints live in one process-global fabric. Work requested through the
contract is only carried out, and only completes, inside ``progress`` of the
initiating endpoint; a message sent to a peer becomes visible there once the
peer itself progresses. With a single progressing thread the completion order
is fully determined by the order of calls.
"""

import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass

from .. import nal, wire
from ..errors import ErrorCode, NbrpcError, Status
from ..nal import OpKind, Permission


@dataclass
class LoopFaults:
    """Test-only fault injection knobs.

    drop_next: the next N sends from this endpoint complete OK but are never delivered.
    delay: seconds every operation posted by this endpoint waits before it may run.
    stalled: operations targeting this endpoint never run (until canceled).
    """
    drop_next: int = 0
    delay: float = 0.0
    stalled: bool = False


class LoopFabric:
    def __init__(self):
        self.cond = threading.Condition(threading.RLock())
        self.endpoints = {}
        self._anon = itertools.count(1)

    def listen(self, locator, sink=None, eager_limit=wire.DEFAULT_EAGER_LIMIT):
        with self.cond:
            if locator in self.endpoints:
                raise NbrpcError(ErrorCode.ADDRESS_IN_USE, f"loop://{locator}")
            ep = LoopEndpoint(self, nal.NetAddress("loop", locator), sink, eager_limit)
            self.endpoints[locator] = ep
            return ep

    def anonymous(self, sink=None, eager_limit=wire.DEFAULT_EAGER_LIMIT):
        with self.cond:
            while True:
                locator = f"anon-{next(self._anon)}"
                if locator not in self.endpoints:
                    return self.listen(locator, sink, eager_limit)

    def lookup(self, locator):
        ep = self.endpoints.get(locator)
        return None if ep is None or ep.closed else ep


FABRIC = LoopFabric()


class LoopEndpoint(nal.Endpoint):
    plugin_name = "loop"

    def __init__(self, fabric, address, sink=None, eager_limit=wire.DEFAULT_EAGER_LIMIT):
        super().__init__(address, sink, eager_limit)
        self.fabric = fabric
        self.faults = LoopFaults()
        self._ops = deque()
        self._inbox = deque()
        self._unexpected = deque()

    def _post(self, op):
        op.extra["posted"] = time.monotonic()
        with self.fabric.cond:
            self._ops.append(op)
            self.fabric.cond.notify_all()
        return op.token

    def send_unexpected(self, dest, msg, tag=None):
        self._check_open()
        dest = nal.parse_address(dest)
        msg = bytes(msg)
        self._check_message(msg)
        if dest.plugin != self.plugin_name:
            raise NbrpcError(ErrorCode.UNKNOWN_PLUGIN, f"loop endpoint cannot reach {dest}")
        self._note_metadata_frame(len(msg))
        return self._post(self._new_op(OpKind.SEND, tag, remote=dest, message=msg))

    def recv_unexpected(self):
        with self.fabric.cond:
            self._check_open()
            return self._unexpected.popleft() if self._unexpected else None

    def get(self, remote, key, remote_offset, local_region, length, tag=None):
        remote, local = self._validate_rma(remote, local_region, length)
        return self._post(self._new_op(OpKind.GET, tag, remote=remote, key=key,
                                       offset=remote_offset, local=local, length=length))

    def put(self, remote, key, remote_offset, local_region, length, tag=None):
        remote, local = self._validate_rma(remote, local_region, length)
        return self._post(self._new_op(OpKind.PUT, tag, remote=remote, key=key,
                                       offset=remote_offset, local=local, length=length))

    def cancel(self, token):
        with self.fabric.cond:
            op = self._live.get(token)
            if op is None or op.extra.get("canceled"):
                raise NbrpcError(ErrorCode.UNKNOWN_TOKEN, str(token))
            op.extra["canceled"] = True
            self.fabric.cond.notify_all()

    def progress(self, timeout=0.0):
        deadline = time.monotonic() + max(timeout, 0.0)
        cond = self.fabric.cond
        with cond:
            while True:
                self._check_open()
                done, wake_at = self._run_ops()
                surfaced = len(self._inbox)
                self._unexpected.extend(self._inbox)
                self._inbox.clear()
                now = time.monotonic()
                if done or surfaced or now >= deadline:
                    break
                cond.wait(min(deadline, wake_at) - now)
        return self._deliver(done) + surfaced

    def _run_ops(self):
        done = []
        kept = deque()
        wake_at = float("inf")
        now = time.monotonic()
        while self._ops:
            op = self._ops.popleft()
            if op.extra.get("canceled"):
                status = Status.CANCELED
            elif now < op.extra["posted"] + self.faults.delay:
                wake_at = min(wake_at, op.extra["posted"] + self.faults.delay)
                kept.append(op)
                continue
            else:
                status = self._execute(op)
                if status is None:
                    kept.append(op)
                    continue
            if self._retire(op.token) is not None:
                done.append(self._completion(op, status))
        self._ops = kept
        return done, wake_at

    def _execute(self, op):
        """Carry out one op under the fabric lock; None means it cannot run yet."""
        if op.kind is not OpKind.SEND and op.length == 0:
            return Status.OK
        peer = self.fabric.lookup(op.remote.locator)
        if peer is None:
            return Status.TRANSPORT_ERROR
        if peer.faults.stalled:
            return None
        if op.kind is OpKind.SEND:
            if self.faults.drop_next > 0:
                self.faults.drop_next -= 1
                return Status.OK
            if len(peer._inbox) + len(peer._unexpected) >= peer.unexpected_capacity:
                return Status.TRANSPORT_ERROR
            peer._inbox.append((self.address, op.message))
            self.fabric.cond.notify_all()
            return Status.OK
        if op.kind is OpKind.GET:
            view = peer.lookup_region(op.key, op.offset, op.length, Permission.READ)
            if view is None:
                return Status.REMOTE_ERROR
            op.local[:op.length] = view
        else:
            view = peer.lookup_region(op.key, op.offset, op.length, Permission.WRITE)
            if view is None:
                return Status.REMOTE_ERROR
            view[:] = op.local[:op.length]
        return Status.OK

    def close(self):
        with self.fabric.cond:
            if self.closed:
                return
            self.closed = True
            if self.fabric.endpoints.get(self.address.locator) is self:
                del self.fabric.endpoints[self.address.locator]
            done = []
            for op in list(self._live.values()):
                if self._retire(op.token) is not None:
                    done.append(self._completion(op, Status.CANCELED))
            self._ops.clear()
            self._inbox.clear()
            self._unexpected.clear()
            self._regions.clear()
            self.fabric.cond.notify_all()
        self._deliver(done)


nal.register_plugin("loop", FABRIC)
