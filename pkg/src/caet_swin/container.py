"""Binary container shared by volumes, masks and checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes
    hlen       uint32, length of the header in bytes
    header     UTF-8 JSON object (keys sorted)
    payload    raw bytes

Every header carries ``format_version`` and a ``checksum`` (hex SHA-256 of
the payload).  Readers validate in a fixed order so a given corruption
always maps to the same error code: magic, header JSON, version, the
caller's own header checks, payload length, checksum.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

from .errors import FormatError

FORMAT_VERSION = 1
_HLEN = struct.Struct("<I")
MAX_HEADER = 1 << 24


def encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    header = dict(header, format_version=FORMAT_VERSION, checksum=hashlib.sha256(payload).hexdigest())
    raw = encode_header(header)
    return magic + _HLEN.pack(len(raw)) + raw + payload


def unpack(blob: bytes, magic: bytes) -> tuple[dict, memoryview]:
    """Split a container into its validated header and payload view.

    Payload length and checksum are checked by :func:`verify_payload`, once
    the caller knows how many bytes the header promises.
    """
    n = len(magic)
    if len(blob) < n or blob[:n] != magic:
        raise FormatError("bad-magic", f"expected magic {magic!r}, found {bytes(blob[:n])!r}")
    if len(blob) < n + _HLEN.size:
        raise FormatError("truncated", "file ends inside the header length field")
    (hlen,) = _HLEN.unpack_from(blob, n)
    start = n + _HLEN.size
    if hlen > MAX_HEADER:
        raise FormatError("bad-header", f"header length {hlen} exceeds {MAX_HEADER}")
    if len(blob) < start + hlen:
        raise FormatError("truncated", "file ends inside the JSON header")
    try:
        header = json.loads(bytes(blob[start:start + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("bad-header", f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("bad-header", "header must be a JSON object")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError("bad-version", f"unsupported format_version {header.get('format_version')!r}")
    if not isinstance(header.get("checksum"), str):
        raise FormatError("bad-header", "header lacks a checksum string")
    return header, memoryview(blob)[start + hlen:]


def verify_payload(header: dict, payload: memoryview, expected: int) -> None:
    if len(payload) < expected:
        raise FormatError("truncated", f"payload has {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise FormatError("bad-header", f"{len(payload) - expected} trailing bytes after the payload")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise FormatError("checksum", "payload checksum mismatch")


def write_bytes(path, blob: bytes) -> None:
    Path(path).write_bytes(blob)


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()
