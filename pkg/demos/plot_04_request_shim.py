"""
Post, test and wait
===================

For simple call sites the request shim hides callbacks: ``post`` starts a
call, ``test`` polls it once, ``wait`` drives the context until it is done.
"""

import threading

import nbrpc

server = nbrpc.init("loop://shim-server")
server.register("upper", lambda h: h.respond(payload=h.get_input().upper()))
sctx = server.context()

client = nbrpc.init(None, plugin="loop")
ctx = client.context()

req = ctx.post(server.address, "upper", b"quiet please")
print("completed right after post?", req.test())

# nobody is serving yet, so a short wait times out but the request lives on
try:
    req.wait(0.05)
except nbrpc.NbrpcError as e:
    print("wait:", e.code.name)

stop = threading.Event()


def serve():
    while not stop.is_set():
        sctx.progress(0.005)
        sctx.trigger(16)


t = threading.Thread(target=serve)
t.start()
print("status:", req.wait(5).name, "output:", req.output)

# several requests in flight at once
reqs = [ctx.post(server.address, "upper", w.encode()) for w in ("a", "bb", "ccc")]
print([r.output for r in reqs if r.wait(5) is nbrpc.Status.OK])

stop.set()
t.join()
client.close()
server.close()
