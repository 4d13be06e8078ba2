"""
Tensor persistence: a JSON manifest plus one little-endian float64 blob.
"""

import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
_DTYPE = np.dtype("<f8")


def manifest_bytes(manifest: Dict[str, Any]) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def save_tensors(directory, manifest: Dict[str, Any], tensors: Sequence[Tuple[str, np.ndarray]]) -> Path:
    """
    Write ``manifest.json`` and ``tensors.bin`` into ``directory``.

    The tensor table is appended to the manifest under ``tensors``; tensor
    bytes follow the table order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    table = []
    chunks = []
    offset = 0
    for name, value in tensors:
        arr = np.ascontiguousarray(value, dtype=_DTYPE)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += int(arr.size)

    full = dict(manifest)
    full["tensors"] = table

    (directory / MANIFEST_NAME).write_bytes(manifest_bytes(full))
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))
    logger.debug(f"Wrote {len(table)} tensors ({offset} values) to {directory}")
    return directory


def load_tensors(directory) -> Tuple[Dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    """Inverse of ``save_tensors``; returns the manifest without its tensor table."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    blob_path = directory / BLOB_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"Checkpoint manifest not found: {manifest_path}")
    if not blob_path.exists():
        raise FileNotFoundError(f"Checkpoint tensors not found: {blob_path}")

    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid checkpoint manifest {manifest_path}: {e}")

    blob = np.frombuffer(blob_path.read_bytes(), dtype=_DTYPE)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in manifest.pop("tensors", []):
        start, count = entry["offset"], entry["count"]
        if start + count > blob.size:
            raise ValueError(f"Tensor {entry['name']} runs past the end of {blob_path}")
        tensors[entry["name"]] = blob[start:start + count].astype(np.float64).reshape(entry["shape"])

    return manifest, tensors
