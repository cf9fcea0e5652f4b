#!/usr/bin/env python3
"""
Parameter snapshots: a flat little-endian f32 .bin file plus a JSON sidecar
listing name, shape and element offset of every tensor.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .error_handler import ArtifactError

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

SNAPSHOT_FORMAT = "sdclab-params"
SNAPSHOT_VERSION = 1


def snapshot_paths(stem: Union[str, Path]) -> Tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_snapshot(params: Params, stem: Union[str, Path], step: Optional[int] = None) -> Path:
    """Write <stem>.bin and <stem>.json; returns the sidecar path."""
    bin_path, json_path = snapshot_paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)

    tensors = []
    offset = 0
    digest = hashlib.sha256()
    with open(bin_path, "wb") as handle:
        for name, value in params.items():
            payload = np.ascontiguousarray(value, dtype="<f4").tobytes()
            handle.write(payload)
            digest.update(payload)
            tensors.append({"name": name, "shape": list(value.shape), "offset": offset})
            offset += int(value.size)

    sidecar: Dict[str, Any] = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "dtype": "float32",
        "byteorder": "little",
        "elements": offset,
        "sha256": digest.hexdigest(),
        "step": step,
        "tensors": tensors,
    }
    with open(json_path, "w", encoding="utf-8") as handle:
        json.dump(sidecar, handle, indent=2)
        handle.write("\n")
    logger.debug(f"Snapshot written: {bin_path} ({offset} elements)")
    return json_path


def load_snapshot(stem: Union[str, Path]) -> Params:
    """Read a snapshot pair back; any inconsistency raises ArtifactError."""
    bin_path, json_path = snapshot_paths(stem)
    try:
        with open(json_path, "r", encoding="utf-8") as handle:
            sidecar = json.load(handle)
        raw = bin_path.read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"cannot read snapshot: {e}", path=str(json_path)) from e

    if sidecar.get("format") != SNAPSHOT_FORMAT:
        raise ArtifactError("not a parameter snapshot", path=str(json_path))
    if hashlib.sha256(raw).hexdigest() != sidecar.get("sha256"):
        raise ArtifactError("snapshot payload checksum mismatch", path=str(bin_path))

    flat = np.frombuffer(raw, dtype="<f4")
    if flat.size != sidecar.get("elements"):
        raise ArtifactError("snapshot element count mismatch", path=str(bin_path))
    params: Params = {}
    for entry in sidecar["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        params[entry["name"]] = flat[start:start + count].astype(np.float32).reshape(shape)
    return params
