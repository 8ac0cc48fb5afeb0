"""Parameter checkpoint files.

Single-file archive: a text manifest followed by raw little-endian value
buffers. Layout (see docs/formats.md):

    line 1:  DGCKPT 1
    line 2:  one JSON object of run metadata (must contain "config_hash")
    line 3:  integer N, the parameter count
    lines 4..3+N:  "<name> <dtype> <dim0,dim1,...> <nbytes>"
    then:    N value buffers, concatenated in manifest order

Buffers are written as '<f4' or '<f8' row-major regardless of host order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import Tensor

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

_MAGIC = b"DGCKPT 1\n"
_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Tensor], meta: dict) -> None:
    """Write named parameter tensors plus a metadata manifest to one file."""
    if "config_hash" not in meta:
        raise CheckpointError("checkpoint metadata must carry a config_hash")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(params)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        fh.write(f"{len(names)}\n".encode())
        blobs = []
        for name in names:
            arr = params[name].values
            code = "f4" if arr.dtype == np.float32 else "f8"
            blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            dims = ",".join(str(d) for d in arr.shape) or "scalar"
            fh.write(f"{name} {code} {dims} {len(blob)}\n".encode())
            blobs.append(blob)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (params dict of name -> Tensor, meta dict)."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        meta = json.loads(fh.readline().decode())
        n = int(fh.readline().decode())
        entries = []
        for _ in range(n):
            name, code, dims, nbytes = fh.readline().decode().split()
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split(","))
            entries.append((name, code, shape, int(nbytes)))
        params = {}
        for name, code, shape, nbytes in entries:
            blob = fh.read(nbytes)
            if len(blob) != nbytes:
                raise CheckpointError(f"{path}: truncated buffer for {name}")
            arr = np.frombuffer(blob, dtype=_DTYPES[code]).reshape(shape)
            params[name] = Tensor(arr.astype(arr.dtype.newbyteorder("=")))
    return params, meta
