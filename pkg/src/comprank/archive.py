"""Portable tensor archives (`.otar`) and JSON report files.

Archive layout, all integers little-endian:

    magic "OTAR" | u32 version = 1 | u64 header_len | header | payload

The header is a UTF-8 JSON array of entries {name, dtype, shape, offset,
nbytes} in storage order; `offset` is relative to the start of the
payload section and 8-byte aligned, gaps are zero padding. Payload data
is float32; tensors are widened to float64 on read. Reports are UTF-8
JSON documents written with sorted keys so equal reports are
byte-identical.
"""

import json
import struct

import numpy as np

MAGIC = b"OTAR"
VERSION = 1
_ALIGN = 8


class ArchiveError(Exception):
    """Base class for archive format violations."""


class DuplicateNameError(ArchiveError):
    """Two tensors were written under the same name."""


class BadMagicError(ArchiveError):
    """The stream does not start with the OTAR magic."""


class VersionError(ArchiveError):
    """The stream's format version is not supported."""


class MalformedHeaderError(ArchiveError):
    """The header is not valid JSON or violates the entry schema."""


class TruncatedPayloadError(ArchiveError):
    """The stream ends before the bytes an entry points at."""


def _aligned(offset):
    return (offset + _ALIGN - 1) // _ALIGN * _ALIGN


def write_archive(named_tensors) -> bytes:
    """Serialize name -> array pairs (dict or iterable of pairs) to bytes.

    Values are cast to float32. Names must be unique.
    """
    pairs = list(named_tensors.items()) if isinstance(named_tensors, dict) \
        else list(named_tensors)
    seen = set()
    entries = []
    chunks = []
    offset = 0
    for name, tensor in pairs:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(tensor, dtype=np.float32)
        if arr.ndim < 1 or any(d < 1 for d in arr.shape):
            raise ArchiveError(f"tensor {name!r} must have order >= 1, extents >= 1")
        data = arr.tobytes()
        start = _aligned(offset)
        chunks.append(b"\x00" * (start - offset))
        chunks.append(data)
        entries.append({
            "name": str(name),
            "dtype": "f32",
            "shape": [int(d) for d in arr.shape],
            "offset": start,
            "nbytes": len(data),
        })
        offset = start + len(data)
    header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<Q", len(header))
    out += header
    out += b"".join(chunks)
    return bytes(out)


def _check_entry(raw):
    if not isinstance(raw, dict):
        raise MalformedHeaderError("header entry is not an object")
    missing = {"name", "dtype", "shape", "offset", "nbytes"} - set(raw)
    if missing:
        raise MalformedHeaderError(f"header entry missing fields {sorted(missing)}")
    if raw["dtype"] != "f32":
        raise MalformedHeaderError(f"unsupported dtype {raw['dtype']!r}")
    shape = raw["shape"]
    if (not isinstance(shape, list) or not shape
            or any(not isinstance(d, int) or d < 1 for d in shape)):
        raise MalformedHeaderError(f"bad shape {shape!r} for {raw['name']!r}")
    count = 1
    for d in shape:
        count *= d
    if raw["nbytes"] != 4 * count:
        raise MalformedHeaderError(
            f"entry {raw['name']!r}: nbytes {raw['nbytes']} != 4 * {count}")
    if not isinstance(raw["offset"], int) or raw["offset"] < 0:
        raise MalformedHeaderError(f"bad offset for {raw['name']!r}")
    return raw


def read_archive(data: bytes) -> dict:
    """Parse an archive; returns an ordered name -> float64 array mapping."""
    if len(data) < 4:
        raise TruncatedPayloadError("stream shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 16:
        raise TruncatedPayloadError("stream ends inside the fixed preamble")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise VersionError(f"unsupported archive version {version}")
    header_len = struct.unpack("<Q", data[8:16])[0]
    if 16 + header_len > len(data):
        raise TruncatedPayloadError("stream ends inside the header")
    try:
        raw_entries = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(raw_entries, list):
        raise MalformedHeaderError("header must be a JSON array")

    payload = data[16 + header_len:]
    tensors = {}
    spans = []
    for raw in raw_entries:
        entry = _check_entry(raw)
        name = entry["name"]
        if name in tensors:
            raise MalformedHeaderError(f"duplicate tensor name {name!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"entry {name!r} needs bytes [{start}, {start + nbytes}) "
                f"but payload has {len(payload)}")
        spans.append((start, start + nbytes, name))
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
        tensors[name] = arr.astype(np.float64).reshape(entry["shape"])
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise MalformedHeaderError(
                f"entries {name_a!r} and {name_b!r} overlap")
    return tensors


def write_archive_file(path, named_tensors):
    blob = write_archive(named_tensors)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read_archive_file(path) -> dict:
    with open(path, "rb") as fh:
        return read_archive(fh.read())


# ---------------------------------------------------------------------------
# JSON reports


def report_to_bytes(report: dict) -> bytes:
    """Canonical UTF-8 encoding: sorted keys, two-space indent, newline end."""
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode("utf-8")


def write_report(path, report: dict) -> bytes:
    blob = report_to_bytes(report)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
