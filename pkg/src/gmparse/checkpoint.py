"""Checkpoint files: one JSON header line followed by raw little-endian blobs.

Header keys: ``version``, ``dtype``, ``params`` (ordered ``[name, shape]``
pairs), ``optimizer`` (hyperparameters) and ``seed``. Blobs are written in
header order with no padding.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state, dtype="float32", optimizer=None, seed=0, extra=None):
    dtype = np.dtype(dtype)
    header = {
        "version": VERSION,
        "dtype": dtype.name,
        "params": [[name, list(np.shape(arr))] for name, arr in state.items()],
        "optimizer": optimizer or {},
        "seed": int(seed),
    }
    if extra:
        header["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    le = dtype.newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    return path


def load_checkpoint(path):
    """Return ``(header, OrderedDict name -> array)``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: bad header: {exc}") from None
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
        body = fh.read()
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    state = OrderedDict()
    offset = 0
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated blob for {name}")
        state[name] = np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return header, state


def blob_size(path):
    """Bytes of parameter payload after the header line."""
    with open(path, "rb") as fh:
        fh.readline()
        return len(fh.read())
