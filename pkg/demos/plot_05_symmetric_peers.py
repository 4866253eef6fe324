"""
Peers that are both origin and target
=====================================

There is no client or server type. Each class below registers ``ping`` and
calls the other one, with each side driven by its own thread.
"""

import threading

import nbrpc

a = nbrpc.init("tcp://127.0.0.1:0")
b = nbrpc.init("tcp://127.0.0.1:0")
N = 50
done = {"a": [], "b": []}


def ping(handle):
    handle.respond(payload=handle.get_input())


for cls in (a, b):
    cls.register("ping", ping)


def run(me, other, name):
    ctx = me.context()
    for i in range(N):
        payload = b"%s-%d" % (name.encode(), i)
        ctx.create(other.address, "ping").forward(done[name].append, payload)
    # keep serving until both directions have finished
    ctx.wait_until(lambda: len(done["a"]) == N and len(done["b"]) == N, timeout=30)


threads = [threading.Thread(target=run, args=(a, b, "a")),
           threading.Thread(target=run, args=(b, a, "b"))]
for t in threads:
    t.start()
for t in threads:
    t.join()

for name, events in done.items():
    ok = sum(ev.status is nbrpc.Status.OK for ev in events)
    print(f"{name}: {ok}/{N} OK, last reply {events[-1].handle.get_output()}")

a.close()
b.close()

# the same thing from the command line, as two processes:
#   bench peers --transport tcp --n 100
