"""
Checkpoint file format.

Layout (all integers little-endian):
    8 bytes   magic b"VECMAP01"
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header:
              {"version": 1, "config": {...}, "meta": {...},
               "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    payload   float64 little-endian arrays, concatenated in header order;
              offsets are relative to the payload start

Files are written to a temporary sibling and renamed into place.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from vecmap.utils.errors import DatasetError

logger = logging.getLogger(__name__)

MAGIC = b"VECMAP01"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def save_checkpoint(
    path: Path,
    arrays: Mapping[str, np.ndarray],
    config: Optional[Dict[str, Any]] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Atomically write named arrays plus JSON metadata.

    Args:
        path: Destination file
        arrays: Name -> array (stored as float64, sorted by name)
        config: Flat run configuration for reload
        meta: Free-form metadata (stage, step, ...)

    Returns:
        The written path
    """
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=_DTYPE).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(np.shape(arrays[name])),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)

    header = {
        "version": FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp_name, path)
    except OSError:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.info(f"Wrote checkpoint {path} ({len(entries)} tensors, {offset} bytes)")
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a checkpoint.

    Args:
        path: Checkpoint file

    Returns:
        (arrays by name, header dict)

    Raises:
        DatasetError: If the file is missing or malformed
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read checkpoint {path}: {e}") from e

    if raw[: len(MAGIC)] != MAGIC:
        raise DatasetError(f"{path} is not a vecmap checkpoint")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetError(f"corrupt checkpoint header in {path}") from e
    if header.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported checkpoint version {header.get('version')}")

    payload = memoryview(raw)[16 + header_len :]
    arrays = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise DatasetError(f"truncated checkpoint {path} at tensor {entry['name']}")
        flat = np.frombuffer(payload[start : start + nbytes], dtype=_DTYPE)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float64)
    return arrays, header


def checkpoint_hash(path: Path) -> str:
    """SHA-256 of the checkpoint file."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
