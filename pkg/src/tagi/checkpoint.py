"""TAGI-CKPT v1 reader/writer.

Layout: b"TAGI" | u32 LE version | u64 LE header length H | H bytes UTF-8 JSON
header | concatenated little-endian float64 payloads. Header tensor entries
carry name, shape, dtype ("f64"), offset and length; offsets are relative to
the payload start and tensors are laid out in header order with no gaps.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TAGI"
VERSION = 1


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64",
                        "offset": offset, "length": nbytes})
        payloads.append(arr.tobytes(order="C"))
        offset += nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Parse and validate the whole file before returning anything."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic (not a TAGI-CKPT file)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} (expected {VERSION})")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} runs past end of file")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    payload = memoryview(raw)[16 + hlen:]
    expected = 0
    out: dict[str, np.ndarray] = {}
    for e in entries:
        name = e.get("name", "?")
        shape = tuple(int(s) for s in e.get("shape", []))
        if e.get("dtype") != "f64":
            raise FormatError(f"{path}: tensor {name!r} has dtype {e.get('dtype')!r}, expected 'f64'")
        if e.get("offset") != expected:
            raise FormatError(f"{path}: tensor {name!r} offset {e.get('offset')} != {expected}")
        length = int(np.prod(shape, dtype=np.int64)) * 8
        if e.get("length") != length:
            raise FormatError(f"{path}: tensor {name!r} length {e.get('length')} disagrees with shape {shape}")
        if expected + length > len(payload):
            raise FormatError(f"{path}: tensor {name!r} is truncated")
        out[name] = np.frombuffer(payload[expected:expected + length], dtype="<f8").reshape(shape).copy()
        expected += length
    if expected != len(payload):
        raise FormatError(f"{path}: {len(payload) - expected} trailing payload bytes not described by header")
    return out, header.get("meta", {})
