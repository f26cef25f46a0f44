"""Checkpoint files: named little-endian tensors behind a JSON directory."""

from __future__ import annotations

import numpy as np

from .. import container
from ..errors import FormatError

CHECKPOINT_MAGIC = b"CSCK"
_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
_NAMES = {v: k for k, v in _DTYPES.items()}


def checkpoint_bytes(tensors: dict[str, np.ndarray], model_kind: str, meta: dict | None = None) -> bytes:
    directory, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _NAMES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        directory[name] = {"dtype": _NAMES[dt], "shape": list(arr.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {"model_kind": model_kind, "tensors": directory, "meta": meta or {}}
    return container.pack(CHECKPOINT_MAGIC, header, b"".join(chunks))


def save_checkpoint(path, tensors: dict[str, np.ndarray], model_kind: str, meta: dict | None = None) -> None:
    container.write_bytes(path, checkpoint_bytes(tensors, model_kind, meta))


def parse_checkpoint(blob: bytes) -> tuple[str, dict[str, np.ndarray], dict]:
    header, payload = container.unpack(blob, CHECKPOINT_MAGIC)
    kind, directory = header.get("model_kind"), header.get("tensors")
    if not isinstance(kind, str) or not isinstance(directory, dict):
        raise FormatError("bad-header", "checkpoint header needs model_kind and a tensor directory")
    end = 0
    for name, ent in directory.items():
        try:
            dt = _DTYPES[ent["dtype"]]
            shape = [int(s) for s in ent["shape"]]
            off, length = int(ent["offset"]), int(ent["length"])
        except (KeyError, TypeError, ValueError):
            raise FormatError("bad-header", f"malformed directory entry for {name!r}") from None
        if min(shape, default=1) < 0 or off < 0:
            raise FormatError("bad-header", f"{name}: negative shape or offset")
        if int(np.prod(shape, dtype=object)) * dt.itemsize != length:
            raise FormatError("dim-overflow", f"{name}: shape {shape} does not fit {length} bytes")
        end = max(end, off + length)
    container.verify_payload(header, payload, end)
    tensors = {}
    for name, ent in directory.items():
        dt = _DTYPES[ent["dtype"]]
        off, length = ent["offset"], ent["length"]
        tensors[name] = np.frombuffer(payload[off:off + length], dtype=dt).reshape(ent["shape"]).copy()
    return header["model_kind"], tensors, header.get("meta", {})


def load_checkpoint(path, expect_kind: str | None = None) -> tuple[str, dict[str, np.ndarray], dict]:
    """Returns ``(model_kind, tensors, meta)``."""
    kind, tensors, meta = parse_checkpoint(container.read_bytes(path))
    if expect_kind is not None and kind != expect_kind:
        raise FormatError("bad-header", f"expected a {expect_kind!r} checkpoint, found {kind!r}")
    return kind, tensors, meta
