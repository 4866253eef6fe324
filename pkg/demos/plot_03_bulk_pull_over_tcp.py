"""
Large arguments through a bulk handle
=====================================

Inline payloads are capped by the eager limit (4 KiB by default). A large
argument is exposed as a bulk handle instead; only its small descriptor
travels with the request, and the target pulls the data itself.
"""

import threading

import numpy as np

import nbrpc
from nbrpc import Permission, wire

server = nbrpc.init("tcp://127.0.0.1:0")
client = nbrpc.init("tcp://127.0.0.1:0")
sctx, cctx = server.context(), client.context()
print("server listening on", server.address.canonical)


def bulk_sink(handle):
    remote = nbrpc.BulkHandle.deserialize(handle.bulk)
    buf = bytearray(remote.total_size)
    local = nbrpc.bulk_create(server, [buf], Permission.WRITE)

    def pulled(ev):
        local.free()
        handle.respond(payload=wire.checksum(buf).to_bytes(4, "little"))

    nbrpc.bulk_transfer(sctx, nbrpc.PULL, remote, 0, local, 0, remote.total_size, pulled)


server.register("bulk_sink", bulk_sink)
client.register("bulk_sink")

# the server gets its own progress/trigger loop on a thread
stop = threading.Event()


def serve():
    while not stop.is_set():
        sctx.progress(0.01)
        sctx.trigger(64)


t = threading.Thread(target=serve)
t.start()

# 16 MiB in three segments; the descriptor stays tiny
data = np.random.default_rng(0).integers(0, 256, 16 << 20, dtype=np.uint8)
parts = np.array_split(data, 3)
handle = nbrpc.bulk_create(client, parts, Permission.READ)
desc = handle.serialize()
print(f"descriptor: {len(desc)} bytes for {handle.total_size} bytes of data")

req = cctx.post(server.address, "bulk_sink", b"", bulk=desc)
req.wait(30)
crc = int.from_bytes(req.output, "little")
print(f"server crc {crc:#010x}, local crc {wire.checksum(data):#010x}")
print("largest metadata frame seen:", server.endpoint.stats["max_metadata_frame"], "bytes")

# trying to send the same data inline is refused
try:
    cctx.post(server.address, "bulk_sink", data[:8192].tobytes())
except nbrpc.NbrpcError as e:
    print("inline attempt:", e.code.name)

stop.set()
t.join()
handle.free()
client.close()
server.close()
