"""
The metadata wire format
========================

Every metadata message is a fixed header followed by a payload. This walks
through building one, reading it back, and the helpers that name RPCs and
check bulk data.
"""

from nbrpc import wire
from nbrpc.wire import Kind, MessageHeader, ProcContext

# RPCs are named by a 32-bit FNV-1a hash of their name, so both sides agree
# on ids without any registry exchange
echo_id = wire.rpc_id_from_name("echo")
print(f"rpc id of 'echo': {echo_id:#010x}")

# arguments are serialized with procs; the same proc encodes or decodes
# depending on the context direction
enc = ProcContext.encoder()
wire.proc_uint32(enc, 7)
wire.proc_string(enc, "hello")
wire.proc_bytes(enc, b"\x00\x01\x02")
payload = enc.getvalue()

frame = wire.encode_frame(MessageHeader(Kind.REQUEST, echo_id, cookie=42), payload)
print(f"frame is {len(frame)} bytes: {wire.HEADER_SIZE} header + {len(payload)} payload")
print("header bytes:", frame[:wire.HEADER_SIZE].hex(" "))

# decode it back
h = wire.decode_header(frame)
print(h)
dec = ProcContext.decoder(frame[wire.HEADER_SIZE:])
print(wire.proc_uint32(dec), wire.proc_string(dec), wire.proc_bytes(dec))

# CRC-32 is what the benchmarks use to prove bulk data arrived intact
print(f"crc32('123456789') = {wire.checksum(b'123456789'):#010x}")
