"""Deterministic binary archive for trained model state.

Layout: 8-byte magic ``SSMARCH\\x01``, an 8-byte little-endian unsigned
header length, a UTF-8 JSON header, then the raw array payloads in the
header's field order. Arrays are stored little-endian (float64/int64);
the header records format version, a kind tag, per-field dtype/shape,
and a free-form metadata dict. Byte output depends only on the content
(sorted keys, repr-based float encoding), so identical state archives
are byte-identical. Loading rejects unknown magic, versions, or kinds.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import MeshFormatError, ValidationError

MAGIC = b"SSMARCH\x01"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def save_archive(path, kind, arrays, meta=None):
    """Write named arrays plus a metadata dict atomically."""
    fields = []
    payloads = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind in "iu":
            arr = arr.astype("<i8")
            code = "<i8"
        else:
            arr = arr.astype("<f8")
            code = "<f8"
        fields.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr).tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": str(kind),
        "fields": fields,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)
    os.replace(tmp, path)


def load_archive(path, expected_kind=None):
    """Read an archive; returns (kind, arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise MeshFormatError(f"{path}: not a state archive (bad magic)")
        header_len = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MeshFormatError(f"{path}: corrupt archive header: {e}") from e
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise ValidationError(
                f"{path}: unsupported archive version {version!r} "
                f"(supported: {FORMAT_VERSION})")
        kind = header.get("kind")
        if expected_kind is not None and kind != expected_kind:
            raise ValidationError(f"{path}: archive kind {kind!r}, expected {expected_kind!r}")
        arrays = {}
        for field in header["fields"]:
            dtype = _DTYPES.get(field["dtype"])
            if dtype is None:
                raise ValidationError(f"{path}: unsupported dtype {field['dtype']!r}")
            shape = tuple(int(s) for s in field["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise MeshFormatError(f"{path}: truncated payload for {field['name']!r}")
            arrays[field["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return kind, arrays, header.get("meta", {})
