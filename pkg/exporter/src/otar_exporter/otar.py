"""Self-contained reader/writer for `.otar` tensor archives.

Independent implementation of the documented interchange format:

    magic "OTAR" | u32 LE version = 1 | u64 LE header_len | header | payload

with a UTF-8 JSON array header of {name, dtype, shape, offset, nbytes}
entries, payload-relative 8-byte-aligned offsets, and float32 payload
data.
"""

import json
import struct

import numpy as np

MAGIC = b"OTAR"
VERSION = 1


class OtarError(Exception):
    """The byte stream violates the archive format."""


def save(path, named_tensors):
    """Write name -> array pairs (dict or iterable of pairs) as float32."""
    pairs = list(named_tensors.items()) if isinstance(named_tensors, dict) \
        else list(named_tensors)
    entries = []
    payload = bytearray()
    seen = set()
    for name, tensor in pairs:
        if name in seen:
            raise OtarError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(tensor, dtype=np.float32)
        pad = (-len(payload)) % 8
        payload += b"\x00" * pad
        entries.append({
            "name": str(name),
            "dtype": "f32",
            "shape": [int(d) for d in arr.shape],
            "offset": len(payload),
            "nbytes": arr.nbytes,
        })
        payload += arr.tobytes()
    header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load(path):
    """Read an archive into an ordered name -> float32 array mapping."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise OtarError(f"{path}: not an OTAR archive")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise OtarError(f"{path}: unsupported version {version}")
    header_len = struct.unpack("<Q", data[8:16])[0]
    if 16 + header_len > len(data):
        raise OtarError(f"{path}: truncated header")
    try:
        entries = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise OtarError(f"{path}: malformed header: {exc}") from exc
    payload = data[16 + header_len:]
    out = {}
    for entry in entries:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise OtarError(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out
