"""``.armdl`` model files.

Layout (all integers little-endian)::

    b"ARMD" | u32 format version | u64 manifest length | u32 manifest crc32
    manifest (UTF-8 JSON) | payload (concatenated float32 tensors)

The manifest lists the network spec and, per tensor, its key, shape, byte
offset and length inside the payload, and a CRC32 of those bytes.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .engine.tensor import Tensor
from .errors import ChecksumError, FormatError, TruncatedError, VersionError
from .network import Network, NetworkSpec, ParamStore

MAGIC = b"ARMD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps_model(net: Network) -> bytes:
    index = []
    chunks = []
    offset = 0
    for key, t in net.store.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        index.append({"key": key, "shape": list(t.shape), "offset": offset, "length": len(raw),
                      "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = canonical_json({"format_version": FORMAT_VERSION, "spec": net.spec.to_dict(), "tensors": index,
                               "payload_length": offset})
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest), zlib.crc32(manifest))
    return header + manifest + b"".join(chunks)


def loads_model(blob: bytes) -> Network:
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"file has {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, mlen, mcrc = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise TruncatedError(f"manifest needs {mlen} bytes, only {len(blob) - start} present")
    raw_manifest = blob[start : start + mlen]
    if zlib.crc32(raw_manifest) != mcrc:
        raise ChecksumError("manifest checksum mismatch")
    manifest = json.loads(raw_manifest)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(manifest.get("format_version"), FORMAT_VERSION)
    payload = blob[start + mlen :]
    if len(payload) < manifest["payload_length"]:
        raise TruncatedError(f"payload needs {manifest['payload_length']} bytes, only {len(payload)} present")
    if len(payload) > manifest["payload_length"]:
        raise FormatError(f"{len(payload) - manifest['payload_length']} trailing bytes after payload")
    store = ParamStore()
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["length"]]
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"checksum mismatch in tensor {entry['key']!r}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        store[entry["key"]] = Tensor(arr, name=entry["key"], dtype=np.float32)
    return Network(NetworkSpec.from_dict(manifest["spec"]), store)


def save_model(net: Network, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_model(net))
    os.replace(tmp, path)


def load_model(path) -> Network:
    return loads_model(Path(path).read_bytes())
