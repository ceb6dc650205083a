"""Named-tensor container: the single on-disk format for datasets, maps and
checkpoints.

Layout (little-endian throughout)::

    bytes 0..4    magic "QMAP1"
    bytes 5..8    header length L (uint32)
    bytes 9..9+L  UTF-8 JSON header:
                  {"entries": [{"name", "dtype": "f32", "shape", "units"}, ...],
                   "meta": {...}}
    remainder     raw float32 payloads, row-major, concatenated in entry order

Writes are atomic (temp file + rename), so readers never observe a partial
file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"QMAP1"


class ContainerError(Exception):
    """Base class for container read failures."""


class MagicError(ContainerError):
    """File does not start with the QMAP1 magic."""


class HeaderError(ContainerError):
    """Header is unparseable or structurally invalid."""


class TruncatedPayloadError(ContainerError):
    """Payload bytes end before the shapes declared in the header."""


def _check_name(name) -> str:
    if not isinstance(name, str) or not name:
        raise HeaderError(f"entry name must be a non-empty string, got {name!r}")
    return name


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None,
                    units: dict[str, str] | None = None) -> None:
    """Write named float32 arrays (insertion order preserved) plus JSON meta."""
    units = units or {}
    entries = []
    payloads = []
    for name, arr in arrays.items():
        _check_name(name)
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({
            "name": name,
            "dtype": "f32",
            "shape": list(data.shape),
            "units": units.get(name, ""),
        })
        payloads.append(data.tobytes())
    header = json.dumps({"entries": entries, "meta": meta or {}}).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for blob in payloads:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns ``(arrays, meta)``.

    Raises :class:`MagicError`, :class:`HeaderError` or
    :class:`TruncatedPayloadError` for the corresponding malformations.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise MagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise HeaderError(f"{path}: truncated header length field")
        (header_len,) = struct.unpack("<I", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise HeaderError(f"{path}: header shorter than declared {header_len} bytes")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HeaderError(f"{path}: header is not valid JSON ({exc})") from exc
        if not isinstance(header, dict) or "entries" not in header:
            raise HeaderError(f"{path}: header missing 'entries' list")
        entries = header["entries"]
        if not isinstance(entries, list):
            raise HeaderError(f"{path}: 'entries' must be a list")
        arrays: dict[str, np.ndarray] = {}
        for entry in entries:
            if not isinstance(entry, dict):
                raise HeaderError(f"{path}: entry is not an object: {entry!r}")
            name = _check_name(entry.get("name"))
            if entry.get("dtype") != "f32":
                raise HeaderError(f"{path}: entry {name!r} has unsupported dtype "
                                  f"{entry.get('dtype')!r} (only 'f32')")
            shape = entry.get("shape")
            if (not isinstance(shape, list)
                    or any(not isinstance(d, int) or d < 0 for d in shape)):
                raise HeaderError(f"{path}: entry {name!r} has invalid shape {shape!r}")
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            blob = fh.read(4 * count)
            if len(blob) != 4 * count:
                raise TruncatedPayloadError(
                    f"{path}: entry {name!r} needs {4 * count} bytes, got {len(blob)}")
            arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        meta = header.get("meta", {})
        if not isinstance(meta, dict):
            raise HeaderError(f"{path}: 'meta' must be an object")
        return arrays, meta


def read_meta(path) -> dict:
    """Read only the JSON meta block (header is stored before payloads)."""
    _, meta = read_header(path)
    return meta


def read_header(path) -> tuple[list[dict], dict]:
    """Read entry descriptors and meta without touching payload bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise MagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise HeaderError(f"{path}: truncated header length field")
        (header_len,) = struct.unpack("<I", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise HeaderError(f"{path}: header shorter than declared {header_len} bytes")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict) or not isinstance(header.get("entries"), list):
        raise HeaderError(f"{path}: header missing 'entries' list")
    meta = header.get("meta", {})
    if not isinstance(meta, dict):
        raise HeaderError(f"{path}: 'meta' must be an object")
    return header["entries"], meta
