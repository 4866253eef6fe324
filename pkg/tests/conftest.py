import itertools
import socket
import time

import pytest

import nbrpc
from nbrpc import nal

_ids = itertools.count()

TRANSPORTS = ["loop", "tcp"]

# lines appended by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def listen_uri(transport):
    if transport == "loop":
        return f"loop://test-{next(_ids)}"
    return "tcp://127.0.0.1:0"


def closed_tcp_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.fixture(params=TRANSPORTS)
def transport(request):
    return request.param


@pytest.fixture
def make_class(transport):
    made = []

    def make(listening=True, eager_limit=nbrpc.DEFAULT_EAGER_LIMIT):
        uri = listen_uri(transport) if listening else None
        cls = nbrpc.init(uri, plugin=transport, eager_limit=eager_limit)
        made.append(cls)
        return cls

    yield make
    for cls in made:
        cls.close()


class Collector:
    """NAL sink that keeps every completion."""

    def __init__(self):
        self.items = []

    def __call__(self, completion):
        self.items.append(completion)

    def by_token(self, token):
        return [c for c in self.items if c.token == token]


@pytest.fixture
def make_endpoint(transport):
    made = []

    def make(eager_limit=nbrpc.DEFAULT_EAGER_LIMIT):
        sink = Collector()
        ep = nal.listen(listen_uri(transport), sink, eager_limit)
        ep.collected = sink
        made.append(ep)
        return ep

    yield make
    for ep in made:
        ep.close()


def pump(endpoints, until, timeout=10.0):
    """Progress endpoints round-robin until ``until()`` holds."""
    deadline = time.monotonic() + timeout
    while not until():
        if time.monotonic() > deadline:
            raise AssertionError("condition not reached before timeout")
        for ep in endpoints:
            ep.progress(0.001)
    return True


def drive(contexts, until, timeout=10.0):
    """Progress and trigger contexts round-robin until ``until()`` holds."""
    deadline = time.monotonic() + timeout
    while True:
        for ctx in contexts:
            ctx.trigger(1 << 30)
        if until():
            return True
        if time.monotonic() > deadline:
            raise AssertionError("condition not reached before timeout")
        for ctx in contexts:
            ctx.progress(0.001)


def frame(kind=nbrpc.wire.Kind.REQUEST, payload=b"", cookie=0, rpc_id=0):
    return nbrpc.wire.encode_frame(nbrpc.wire.MessageHeader(kind, rpc_id, cookie), payload)
