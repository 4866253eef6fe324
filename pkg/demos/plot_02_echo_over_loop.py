"""
Echo over the in-process transport
==================================

A target registers a handler, an origin forwards a call, and both sides
drive their context with ``progress`` and ``trigger``. Callbacks only run
inside ``trigger``.
"""

import nbrpc

server = nbrpc.init("loop://demo-server")
client = nbrpc.init(None, plugin="loop")   # anonymous: can call, cannot be called


def echo(handle):
    # target handlers are completion events too; this runs inside trigger
    print("  handler sees", handle.get_input(), "in_trigger:", nbrpc.in_trigger())
    handle.respond(payload=handle.get_input())


server.register("echo", echo)
client.register("echo")
sctx, cctx = server.context(), client.context()

results = []
h = cctx.create(server.address, "echo")
h.forward(results.append, b"ping over loop")
print("after forward:", h.state.value)

# nothing happens until somebody progresses
while not results:
    for ctx in (cctx, sctx):
        ctx.progress(0.01)
        ctx.trigger(16)

ev = results[0]
print("status:", ev.status.name, "output:", ev.handle.get_output())

# calling a name the target does not know fails fast with NO_SUCH_RPC
results.clear()
cctx.create(server.address, "nobody").forward(results.append)
while not results:
    for ctx in (cctx, sctx):
        ctx.progress(0.01)
        ctx.trigger(16)
print("unknown rpc:", results[0].status.name)

client.close()
server.close()
