"""Single-file checkpoint container: JSON header plus raw little-endian float32 arrays.

The header line carries the format version, model/class metadata, and an array
directory (name, shape, byte offset). Loading then saving is byte-stable, and a
version mismatch is rejected outright.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, state_dict: dict, meta: dict) -> None:
    """state_dict maps names to tensors (stored float32); meta must be JSON-serializable."""
    names = sorted(state_dict.keys())
    directory = []
    blobs = []
    offset = 0
    for name in names:
        arr = state_dict[name].detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "meta": meta, "arrays": directory}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(header_bytes + b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (state_dict of float32 tensors, meta dict)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from e
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {header.get('format_version')} "
                f"not supported (expected {FORMAT_VERSION})")
        payload = f.read()
    state = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        state[entry["name"]] = torch.tensor(arr.copy())
    return state, header["meta"]
