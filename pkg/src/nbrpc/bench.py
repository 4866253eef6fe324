"""``bench``: echo latency, bulk bandwidth and a two-peer demo.

Usage::

    bench serve --listen tcp://127.0.0.1:0
    bench latency --server tcp://127.0.0.1:7777 --size 64 --iters 1000 --json
    bench bandwidth --server tcp://127.0.0.1:7777 --bulk-size 67108864 --json
    bench peers --transport loop --n 100

A ``loop://`` server given to ``latency`` or ``bandwidth`` is started inside
the same process. Options may also come from a flat ``key=value`` file passed
with ``--config``; command-line flags win over the file, the file over the
BENCH_EAGER_LIMIT environment variable, which wins over built-in defaults.

Exit codes: 0 success, 1 correctness failure, 2 usage error, 3 transport failure.
"""

import argparse
import json
import os
import socket
import struct
import subprocess
import sys
import threading
import time

import numpy as np

from . import wire
from .bulk import PULL, BulkHandle, bulk_create, bulk_free, bulk_transfer
from .errors import ErrorCode, NbrpcError, Status
from .nal import Permission, parse_address
from .rpc import init
from .transport.loop import FABRIC

EXIT_OK, EXIT_CORRECTNESS, EXIT_USAGE, EXIT_TRANSPORT = 0, 1, 2, 3

REPORT_KEYS = ("operation", "transport", "iterations", "payload_size", "bulk_size",
               "p50_us", "p90_us", "p99_us", "mean_us", "throughput", "throughput_unit",
               "mismatches", "status")

DEFAULTS = {
    "listen": None, "server": None, "size": 0, "iters": 1000, "warmup": 10,
    "bulk_size": 1 << 20, "transport": "loop", "n": 100, "threads": 1,
    "timeout": 10.0, "json": False, "eager_limit": wire.DEFAULT_EAGER_LIMIT,
}

COMMAND_DEFAULTS = {"bandwidth": {"iters": 5}}

_SINK_REPLY = struct.Struct("<BI")


class UsageError(Exception):
    pass


class TransportFailure(Exception):
    pass


def read_config_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(key, value):
    default = DEFAULTS.get(key)
    if isinstance(value, str):
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    return value


def resolve_config(args):
    """Merge flags > config file > environment > defaults into a plain dict."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    env = {}
    if os.environ.get("BENCH_EAGER_LIMIT"):
        env["eager_limit"] = os.environ["BENCH_EAGER_LIMIT"]
    defaults = dict(DEFAULTS, **COMMAND_DEFAULTS.get(getattr(args, "command", None), {}))
    cfg = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            value = flag
        elif key in file_values:
            value = file_values[key]
        elif key in env:
            value = env[key]
        else:
            value = default
        try:
            cfg[key] = _coerce(key, value)
        except ValueError:
            raise UsageError(f"bad value for {key}: {value!r}") from None
    if cfg["iters"] < 1:
        raise UsageError("iters must be >= 1")
    for key in ("warmup", "size", "bulk_size", "n"):
        if cfg[key] < 0:
            raise UsageError(f"{key} must be >= 0")
    return cfg


def percentiles(samples_us):
    p50, p90, p99 = np.percentile(np.asarray(samples_us, dtype=float), [50, 90, 99])
    return float(p50), float(p90), float(p99)


def make_report(operation, cfg, transport, samples_us=(), mismatches=0, status="OK",
                throughput=0.0, unit="ops/s"):
    report = dict.fromkeys(REPORT_KEYS)
    report.update(operation=operation, transport=transport, iterations=len(samples_us),
                  payload_size=cfg.get("size", 0), bulk_size=cfg.get("bulk_size", 0),
                  mismatches=mismatches, status=status, throughput=throughput,
                  throughput_unit=unit)
    if len(samples_us):
        p50, p90, p99 = percentiles(samples_us)
        report.update(p50_us=p50, p90_us=p90, p99_us=p99, mean_us=float(np.mean(samples_us)))
    else:
        report.update(p50_us=0.0, p90_us=0.0, p99_us=0.0, mean_us=0.0)
    return report


def emit(report, as_json, out=None):
    out = out or sys.stdout
    if as_json:
        print(json.dumps(report, sort_keys=False), file=out, flush=True)
        return
    print(f"{report['operation']} over {report['transport']}: {report['status']}", file=out)
    print(f"  iterations {report['iterations']}  payload {report['payload_size']} B  "
          f"bulk {report['bulk_size']} B  mismatches {report['mismatches']}", file=out)
    print(f"  latency us  p50 {report['p50_us']:.1f}  p90 {report['p90_us']:.1f}  "
          f"p99 {report['p99_us']:.1f}  mean {report['mean_us']:.1f}", file=out)
    print(f"  throughput {report['throughput']:.1f} {report['throughput_unit']}", file=out,
          flush=True)


# -- server ---------------------------------------------------------------------


class Server:
    """Hosts ``echo``, ``bulk_sink`` and ``stop`` on one RPC class."""

    def __init__(self, listen_uri, eager_limit=wire.DEFAULT_EAGER_LIMIT):
        self.rpc_class = init(listen_uri, eager_limit=eager_limit)
        self.context = self.rpc_class.context()
        self.stopping = threading.Event()
        self.rpc_class.register("echo", self._echo)
        self.rpc_class.register("bulk_sink", self._bulk_sink)
        self.rpc_class.register("stop", self._stop)

    @property
    def address(self):
        return self.rpc_class.address

    def _echo(self, handle):
        handle.respond(None, handle.get_input())

    def _stop(self, handle):
        handle.respond(lambda ev: self.stopping.set())

    def _bulk_sink(self, handle):
        if handle.bulk is None:
            handle.respond(None, _SINK_REPLY.pack(Status.DECODE_ERROR, 0))
            return
        try:
            remote = BulkHandle.deserialize(handle.bulk)
        except NbrpcError:
            handle.respond(None, _SINK_REPLY.pack(Status.DECODE_ERROR, 0))
            return
        buf = bytearray(remote.total_size)
        local = bulk_create(self.rpc_class, [buf], Permission.WRITE)

        def pulled(event):
            bulk_free(local)
            crc = wire.checksum(buf) if event.status is Status.OK else 0
            handle.respond(None, _SINK_REPLY.pack(event.status, crc))

        bulk_transfer(self.context, PULL, remote, 0, local, 0, remote.total_size, pulled)

    def serve(self, threads=1, until=None):
        """Loop progress/trigger until ``stop`` was answered (or ``until`` is set)."""
        until = until or self.stopping
        workers = []

        def trigger_loop():
            while not until.is_set() and not self.rpc_class.closed:
                try:
                    if self.context.trigger(64) == 0:
                        time.sleep(0.0005)
                except NbrpcError:
                    return

        for _ in range(max(threads, 1) - 1):
            t = threading.Thread(target=trigger_loop, daemon=True)
            t.start()
            workers.append(t)
        try:
            while not until.is_set():
                self.context.progress(0.01)
                self.context.trigger(64)
        finally:
            for t in workers:
                t.join()

    def close(self):
        self.rpc_class.close()


class _InProcessServer:
    """A loop server run on a background thread for the client commands."""

    def __init__(self, uri, eager_limit):
        self.server = Server(uri, eager_limit)
        self.done = threading.Event()
        self.thread = threading.Thread(target=self.server.serve, kwargs={"until": self.done},
                                       daemon=True)
        self.thread.start()

    def close(self):
        self.done.set()
        self.thread.join()
        self.server.close()


def _maybe_local_server(server_uri, eager_limit):
    addr = parse_address(server_uri)
    if addr.plugin == "loop" and FABRIC.lookup(addr.locator) is None:
        return _InProcessServer(server_uri, eager_limit)
    return None


def _client_listen_uri(server):
    if server.plugin == "loop":
        return f"loop://bench-client-{os.getpid()}-{time.monotonic_ns()}"
    host = server.locator.rpartition(":")[0].strip("[]")
    try:
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as probe:
            probe.connect((host, 9))
            host = probe.getsockname()[0]
    except OSError:
        pass
    return f"tcp://{host}:0"


# -- commands -------------------------------------------------------------------


def cmd_serve(cfg, out=None):
    out = out or sys.stdout
    if not cfg["listen"]:
        raise UsageError("serve needs --listen")
    server = Server(cfg["listen"], cfg["eager_limit"])
    print(f"LISTEN {server.address.canonical}", file=out, flush=True)
    try:
        server.serve(threads=cfg["threads"])
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


def _wait(request, timeout):
    try:
        return request.wait(timeout)
    except NbrpcError as e:
        if e.code is ErrorCode.TIMEOUT:
            try:
                request.cancel()
            except NbrpcError:
                pass
            return Status.TIMEOUT
        raise


def cmd_latency(cfg, out=None):
    if not cfg["server"]:
        raise UsageError("latency needs --server")
    server = parse_address(cfg["server"])
    size, limit = cfg["size"], cfg["eager_limit"]
    if size + 8 > limit:
        print(f"OVERSIZE: a {size}-byte echo payload does not fit the {limit}-byte eager "
              "limit; use `bench bandwidth` to move large data through a bulk handle",
              file=sys.stderr)
        return EXIT_USAGE
    local = _maybe_local_server(cfg["server"], limit)
    client = init(None, plugin=server.plugin, eager_limit=limit)
    ctx = client.context()
    client.register("echo")
    rng = np.random.default_rng()
    samples, mismatches, status = [], 0, Status.OK
    t_start = time.perf_counter()
    try:
        for i in range(cfg["warmup"] + cfg["iters"]):
            payload = rng.integers(0, 256, size, dtype=np.uint8).tobytes()
            t0 = time.perf_counter_ns()
            req = ctx.post(server, "echo", payload)
            status = _wait(req, cfg["timeout"])
            elapsed = (time.perf_counter_ns() - t0) / 1000.0
            if status is not Status.OK:
                break
            if req.output != payload:
                mismatches += 1
            if i == cfg["warmup"] - 1:
                t_start = time.perf_counter()
            if i >= cfg["warmup"]:
                samples.append(elapsed)
        total = time.perf_counter() - t_start
    finally:
        client.close()
        if local:
            local.close()
    throughput = len(samples) / total if samples and total > 0 else 0.0
    cfg = dict(cfg, bulk_size=0)
    report = make_report("latency", cfg, server.plugin, samples, mismatches, status.name,
                         throughput, "ops/s")
    emit(report, cfg["json"], out)
    if status is not Status.OK:
        return EXIT_TRANSPORT
    return EXIT_CORRECTNESS if mismatches else EXIT_OK


def cmd_bandwidth(cfg, out=None, corrupt=False):
    if not cfg["server"]:
        raise UsageError("bandwidth needs --server")
    if cfg["bulk_size"] < 1:
        raise UsageError("bulk-size must be >= 1")
    server = parse_address(cfg["server"])
    local = _maybe_local_server(cfg["server"], cfg["eager_limit"])
    client = init(_client_listen_uri(server), eager_limit=cfg["eager_limit"])
    ctx = client.context()
    client.register("bulk_sink")
    data = np.random.default_rng().integers(0, 256, cfg["bulk_size"], dtype=np.uint8)
    samples, mismatches, status = [], 0, Status.OK
    try:
        handle = bulk_create(client, [data], Permission.READ)
        expected = wire.checksum(data)
        if corrupt:
            data[len(data) // 2] ^= 0xFF
        iterations = 1 if corrupt else max(1, min(cfg["iters"], 1 << 30))
        for _ in range(iterations):
            t0 = time.perf_counter_ns()
            req = ctx.post(server, "bulk_sink", b"", bulk=handle)
            status = _wait(req, cfg["timeout"])
            elapsed = (time.perf_counter_ns() - t0) / 1000.0
            if status is not Status.OK:
                break
            remote_status, crc = _SINK_REPLY.unpack(req.output)
            if remote_status != Status.OK:
                status = Status(remote_status)
                break
            if crc != expected:
                mismatches += 1
            samples.append(elapsed)
        bulk_free(handle)
    finally:
        client.close()
        if local:
            local.close()
    throughput = (cfg["bulk_size"] * len(samples) / (sum(samples) / 1e6)) if samples else 0.0
    cfg = dict(cfg, size=0)
    name = "CRC_MISMATCH" if mismatches else status.name
    report = make_report("bandwidth", cfg, server.plugin, samples, mismatches, name,
                         throughput, "bytes/s")
    emit(report, cfg["json"], out)
    if status is not Status.OK:
        return EXIT_TRANSPORT
    return EXIT_CORRECTNESS if mismatches else EXIT_OK


class Peer:
    """One side of the symmetric demo: serves ``ping`` and calls the other side."""

    def __init__(self, listen_uri, eager_limit=wire.DEFAULT_EAGER_LIMIT, kill_after=None):
        self.rpc_class = init(listen_uri, eager_limit=eager_limit)
        self.context = self.rpc_class.context()
        self.served = 0
        self.kill_after = kill_after
        self.requests = []
        self.rpc_class.register("ping", self._ping)

    def _ping(self, handle):
        handle.respond(None, handle.get_input())
        self.served += 1
        if self.kill_after is not None and self.served >= self.kill_after:
            os._exit(9)

    def start_calls(self, other, n):
        self.requests = [self.context.post(other, "ping", b"ping %d" % i) for i in range(n)]

    @property
    def calls_done(self):
        return all(r.completed for r in self.requests)

    def step(self, timeout=0.0):
        self.context.progress(timeout)
        self.context.trigger(1 << 30)

    def failures(self):
        bad = {}
        for i, r in enumerate(self.requests):
            if r.completed and (r.status is not Status.OK or r.output != b"ping %d" % i):
                key = r.status.name if r.status is not Status.OK else "MISMATCH"
                bad[key] = bad.get(key, 0) + 1
        return bad


def cmd_peers(cfg, out=None, kill_after=None):
    out = out or sys.stdout
    n = cfg["n"]
    if cfg["transport"] == "loop":
        tag = f"{os.getpid()}-{time.monotonic_ns()}"
        a = Peer(f"loop://peer-a-{tag}", cfg["eager_limit"])
        b = Peer(f"loop://peer-b-{tag}", cfg["eager_limit"])
        try:
            a.start_calls(b.rpc_class.address, n)
            b.start_calls(a.rpc_class.address, n)
            deadline = time.monotonic() + cfg["timeout"] + n * 0.01
            while not (a.calls_done and b.calls_done) and time.monotonic() < deadline:
                a.step()
                b.step()
            bad = {}
            for peer in (a, b):
                for k, v in peer.failures().items():
                    bad[k] = bad.get(k, 0) + v
            ok = a.calls_done and b.calls_done and not bad
            if not (a.calls_done and b.calls_done):
                bad["TIMEOUT"] = bad.get("TIMEOUT", 0) + 1
        finally:
            a.rpc_class.close()
            b.rpc_class.close()
        print(f"peers loop: {2 * n} calls, {'OK' if ok else 'FAILED'} {bad or ''}".rstrip(),
              file=out, flush=True)
        return EXIT_OK if ok else EXIT_CORRECTNESS
    if cfg["transport"] != "tcp":
        raise UsageError(f"unknown transport {cfg['transport']!r}")
    return _peers_tcp(cfg, out, kill_after)


def _peers_tcp(cfg, out, kill_after):
    n = cfg["n"]
    me = Peer("tcp://127.0.0.1:0", cfg["eager_limit"])
    cmd = [sys.executable, "-m", "nbrpc.bench", "_peer", "--listen", "tcp://127.0.0.1:0",
           "--peer", me.rpc_class.address.canonical, "--n", str(n),
           "--eager-limit", str(cfg["eager_limit"])]
    if kill_after is not None:
        cmd += ["--kill-after", str(kill_after)]
    child = subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True)
    summary = {}
    try:
        line = child.stdout.readline().split()
        if len(line) != 2 or line[0] != "LISTEN":
            raise TransportFailure("peer process did not start")
        me.start_calls(line[1], n)
        deadline = time.monotonic() + cfg["timeout"] + n * 0.05
        while time.monotonic() < deadline:
            me.step(0.005)
            if me.calls_done and me.served >= n:
                break
            if child.poll() is not None and not (me.calls_done and me.served >= n):
                for r in me.requests:
                    if not r.completed:
                        try:
                            r.cancel()
                        except NbrpcError:
                            pass
                me.step()
                summary["TRANSPORT_ERROR"] = sum(1 for r in me.requests
                                                 if r.status is not Status.OK)
                break
        else:
            summary["TIMEOUT"] = 1
        while child.poll() is None and not summary and time.monotonic() < deadline:
            me.step(0.005)
        if child.poll() is None:
            child.kill()
        code = child.wait()
    finally:
        me.rpc_class.close()
    for k, v in me.failures().items():
        if k != "CANCELED":
            summary[k] = summary.get(k, 0) + v
    if code not in (0, None) and "TRANSPORT_ERROR" not in summary:
        summary["TRANSPORT_ERROR"] = summary.get("TRANSPORT_ERROR", 0) or 1
    ok = not summary and code == 0
    print(f"peers tcp: {2 * n} calls, {'OK' if ok else 'FAILED'} {summary or ''}".rstrip(),
          file=out, flush=True)
    if ok:
        return EXIT_OK
    if "TRANSPORT_ERROR" in summary or "TIMEOUT" in summary:
        return EXIT_TRANSPORT
    return EXIT_CORRECTNESS


def cmd_peer_child(args):
    """Child side of ``peers --transport tcp``."""
    peer = Peer(args.listen, args.eager_limit or wire.DEFAULT_EAGER_LIMIT, args.kill_after)
    print(f"LISTEN {peer.rpc_class.address.canonical}", flush=True)
    peer.start_calls(args.peer, args.n)
    deadline = time.monotonic() + 30 + args.n * 0.05
    while time.monotonic() < deadline and not (peer.calls_done and peer.served >= args.n):
        peer.step(0.005)
    ok = peer.calls_done and peer.served >= args.n and not peer.failures()
    peer.rpc_class.close()
    return EXIT_OK if ok else EXIT_CORRECTNESS


# -- argument parsing -------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file")
    common.add_argument("--eager-limit", type=int, dest="eager_limit",
                        help="inline payload limit in bytes (default 4096)")
    common.add_argument("--json", action="store_true", default=None, help="JSON report")
    common.add_argument("--timeout", type=float, help="per-call timeout in seconds")

    parser = argparse.ArgumentParser(
        prog="bench", description="Echo latency, bulk bandwidth and a two-peer demo.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{serve,latency,bandwidth,peers}")

    p = sub.add_parser("serve", parents=[common], help="host echo/bulk_sink/stop")
    p.add_argument("--listen")
    p.add_argument("--threads", type=int, help="trigger threads")

    p = sub.add_parser("latency", parents=[common], help="echo round-trip latency")
    p.add_argument("--server")
    p.add_argument("--size", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--warmup", type=int)

    p = sub.add_parser("bandwidth", parents=[common], help="bulk pull bandwidth")
    p.add_argument("--server")
    p.add_argument("--bulk-size", type=int, dest="bulk_size")
    p.add_argument("--iters", type=int)
    p.add_argument("--inject-corruption", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("peers", parents=[common], help="two peers calling each other")
    p.add_argument("--transport", choices=["loop", "tcp"])
    p.add_argument("--n", type=int)
    p.add_argument("--kill-after", type=int, dest="kill_after", help=argparse.SUPPRESS)

    p = sub.add_parser("_peer", parents=[common])
    p.add_argument("--listen", required=True)
    p.add_argument("--peer", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--kill-after", type=int, dest="kill_after")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "_peer":
            return cmd_peer_child(args)
        cfg = resolve_config(args)
        if args.command == "serve":
            return cmd_serve(cfg)
        if args.command == "latency":
            return cmd_latency(cfg)
        if args.command == "bandwidth":
            return cmd_bandwidth(cfg, corrupt=args.inject_corruption)
        return cmd_peers(cfg, kill_after=args.kill_after)
    except UsageError as e:
        print(f"bench: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NbrpcError as e:
        print(f"bench: {e}", file=sys.stderr)
        if e.code in (ErrorCode.BAD_URI, ErrorCode.UNKNOWN_PLUGIN, ErrorCode.OVERSIZE):
            return EXIT_USAGE
        return EXIT_TRANSPORT
    except TransportFailure as e:
        print(f"bench: {e}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
