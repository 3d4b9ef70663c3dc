"""`.ckpt` files: one JSON manifest line, then float32 little-endian tensor payloads.

Tensors are stored back to back in manifest order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT = "cvsynth-ckpt"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict, meta: dict) -> None:
    entries = []
    blobs = []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = dict(meta, format=FORMAT, tensors=entries)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def load_tensors(path):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:nl].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed manifest ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    tensors = {}
    offset = nl + 1
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']!r}")
        tensors[entry["name"]] = torch.from_numpy(np.frombuffer(chunk, dtype="<f4").reshape(shape).copy())
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return manifest, tensors
