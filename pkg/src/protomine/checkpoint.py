"""Checkpoint format: one JSON header line, then raw parameter buffers.

The header records the format tag, precision, model dimensions, the full
run config, and an ordered list of (name, shape) entries.  The payload is
each parameter's bytes, little-endian, concatenated in header order.
Round-trips are bit exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import resolve_dtype
from .errors import CheckpointError

FORMAT_TAG = "protomine-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, model, cfg) -> None:
    params = model.named_parameters()
    dtype = np.dtype(resolve_dtype(cfg.precision)).newbyteorder("<")
    header = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "precision": cfg.precision,
        "channels": cfg.channels,
        "layers": cfg.layers,
        "config": cfg.as_dict(),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params],
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(b"\n")
        for _, t in params:
            fh.write(np.ascontiguousarray(t.data, dtype=dtype).tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header in {path}: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path):
    """Return (header, state dict of name -> ndarray)."""
    header = read_header(path)
    dtype = np.dtype(resolve_dtype(header["precision"])).newbyteorder("<")
    state = {}
    with open(path, "rb") as fh:
        fh.readline()
        payload = fh.read()
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"truncated checkpoint {path}: parameter {entry['name']!r} "
                f"needs {nbytes} bytes, got {len(chunk)}")
        state[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes in {path}")
    return header, state


def checkpoint_config(path) -> dict:
    return read_header(path)["config"]


def exists(path) -> bool:
    return Path(path).is_file()
