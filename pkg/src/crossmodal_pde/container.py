"""Portable file container: one UTF-8 JSON header line, then raw binary blocks.

The header's ``blocks`` manifest records name/dtype/shape/offset for each
block; payload bytes are little-endian, row-major, concatenated in manifest
order.  Datasets, proxy sets, and model checkpoints all use this container.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


class DataFileError(IOError):
    """A container file is missing, truncated, or malformed."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.int32:
        return "<i4"
    raise DataFileError(f"unsupported block dtype {arr.dtype}")


def write_container(path, header: dict, blocks: list[tuple[str, np.ndarray]]) -> None:
    """Write header + blocks atomically (temp file then rename)."""
    manifest = []
    offset = 0
    payloads = []
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        manifest.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        payloads.append(raw)
    full_header = dict(header)
    full_header["format_version"] = FORMAT_VERSION
    full_header["blocks"] = manifest
    line = json.dumps(full_header, sort_keys=True, separators=(",", ":")) + "\n"
    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".tmp-container-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(line.encode("utf-8"))
            for raw in payloads:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns (header, {block name: array})."""
    if not os.path.exists(path):
        raise DataFileError(f"container file not found: {path}")
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFileError(f"bad container header in {path}: {exc}") from exc
        payload = fh.read()
    blocks: dict[str, np.ndarray] = {}
    for entry in header.get("blocks", []):
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataFileError(f"unknown dtype {entry['dtype']!r} in {path}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(payload):
            raise DataFileError(f"truncated payload for block {entry['name']!r} in {path}")
        arr = np.frombuffer(payload[start:stop], dtype=dtype).reshape(shape)
        blocks[entry["name"]] = arr.copy()
    return header, blocks
