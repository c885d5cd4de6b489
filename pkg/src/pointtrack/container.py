"""Single-file tensor container shared by scenes, checkpoints, track files.

Layout (all integers little-endian)::

    magic      8 bytes   b"PTRKCONT"
    version    uint32    FORMAT_VERSION
    hdr_len    uint64    length of the JSON header in bytes
    header     hdr_len bytes of UTF-8 JSON
    payload    raw tensors, back to back, in the order of header["tensors"]

``header["tensors"]`` is a list of ``{"name", "dtype", "shape"}`` records;
``dtype`` is a numpy dtype string with explicit byte order (``"<f4"``,
``"<f8"``, ``"<i8"``, ``"|u1"``).  Everything else in the header is free-form
metadata owned by the writer (``header["kind"]`` names the producer).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTRKCONT"
FORMAT_VERSION = 1
_ALLOWED_DTYPES = ("<f4", "<f8", "<i8", "|u1")
_PREAMBLE = struct.Struct("<8sIQ")


class ContainerError(IOError):
    """Base class for container read failures."""


class CorruptedFileError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


def write_container(path, meta: dict, tensors: dict) -> None:
    """Write ``tensors`` (name -> array) with JSON metadata ``meta``.

    The write goes to a temporary sibling first and is renamed into place.
    """
    path = Path(path)
    arrays = []
    records = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
        if dt.str not in _ALLOWED_DTYPES:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=dt)
        arrays.append(arr)
        records.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
    header = dict(meta)
    header["tensors"] = records
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict]:
    """Return ``(meta, tensors)``; raises CorruptedFileError / VersionError."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREAMBLE.size:
        raise CorruptedFileError(f"{path}: truncated preamble")
    magic, version, hdr_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptedFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = _PREAMBLE.size
    if off + hdr_len > len(data):
        raise CorruptedFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[off:off + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptedFileError(f"{path}: unreadable header ({exc})") from None
    off += hdr_len
    tensors = {}
    for rec in header.pop("tensors", []):
        dt = np.dtype(rec["dtype"])
        shape = tuple(rec["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(data):
            raise CorruptedFileError(f"{path}: truncated tensor {rec['name']!r}")
        tensors[rec["name"]] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize,
                                             offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise CorruptedFileError(f"{path}: {len(data) - off} trailing bytes")
    return header, tensors
