"""Versioned binary container: JSON header + raw little-endian arrays + SHA-256.

Layout::

    magic (8 bytes) | version (u32 LE) | header length (u64 LE) | header (UTF-8 JSON)
    | payload (concatenated little-endian arrays) | sha256 of all preceding bytes (32 bytes)

Used by both checkpoints (``.advckpt``) and attack sets (``.advset``).
"""

import hashlib
import json
import struct

import numpy as np

from advlab.core.errors import CheckpointIntegrityError, CheckpointVersionError

_PREAMBLE = struct.Struct("<8sIQ")
_DIGEST_LEN = 32
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8"), "<i4": np.dtype("<i4")}


def _le(array):
    array = np.asarray(array)
    if array.dtype.kind == "f":
        dt = np.dtype("<f8") if array.dtype.itemsize == 8 else np.dtype("<f4")
    elif array.dtype.kind in "iub":
        dt = np.dtype("<i8") if array.dtype.itemsize == 8 else np.dtype("<i4")
    else:
        raise TypeError(f"unsupported array dtype {array.dtype}")
    # ascontiguousarray would promote 0-d arrays to 1-d
    return np.asarray(array, dtype=dt, order="C")


def encode(magic, version, header, arrays):
    """Serialise ``header`` (JSON-able dict) and named arrays to bytes."""
    entries, chunks, offset = [], [], 0
    for name, array in arrays.items():
        arr = _le(array)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = dict(header)
    head["tensors"] = entries
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREAMBLE.pack(magic, version, len(head_bytes)) + head_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(data, magic, version, what="file"):
    """Inverse of :func:`encode`; returns ``(header, arrays)``."""
    if len(data) < _PREAMBLE.size + _DIGEST_LEN:
        raise CheckpointIntegrityError(f"{what} is truncated ({len(data)} bytes)")
    got_magic, got_version, head_len = _PREAMBLE.unpack_from(data)
    if got_magic != magic:
        raise CheckpointIntegrityError(f"{what} has bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise CheckpointVersionError(f"{what} has format version {got_version}; this build reads version {version}")
    body, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{what} failed checksum verification (corrupt or truncated)")
    start = _PREAMBLE.size
    try:
        header = json.loads(body[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{what} header is not valid JSON: {exc}") from None
    payload = body[start + head_len:]
    arrays = {}
    for entry in header.pop("tensors"):
        dt = _DTYPES[entry["dtype"]]
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointIntegrityError(f"{what}: tensor {entry['name']!r} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(payload[lo:hi], dtype=dt).reshape(entry["shape"]).copy()
    return header, arrays


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
