"""Checkpoint container.

Layout::

    b"CLADCKP\\n"             8-byte magic
    u32 little-endian         header length N
    N bytes UTF-8 JSON        {"format_version", "tag", "config", "tensors", "extra"}
    raw tensor data           concatenated, little-endian, in header order

Each entry of ``tensors`` is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with ``offset`` relative to the start of the data section. The JSON is
written with sorted keys, so identical weights give identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import LoadError
from .config import ModelConfig
from .network import CLAD

MAGIC = b"CLADCKP\n"
FORMAT_VERSION = 1

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_checkpoint(path, model: CLAD, tag: str, extra=None, state_dict=None) -> None:
    state = state_dict if state_dict is not None else model.state_dict()
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise LoadError(f"cannot serialise {name} with dtype {t.dtype}")
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "tag": tag, "config": model.config.to_dict(),
         "tensors": entries, "extra": extra or {}},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (header, {name: tensor})."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if not data.startswith(MAGIC):
        raise LoadError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + n])
    except ValueError as exc:
        raise LoadError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported format version {header.get('format_version')}")
    base = start + n
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise LoadError(f"{path}: tensor {e['name']} truncated")
        arr = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return header, tensors


def load_checkpoint(path, config: ModelConfig = None, expected_tag=None) -> tuple[CLAD, dict]:
    """Rebuild a model from a checkpoint.

    If ``config`` is given it must match the stored one; a mismatch is a LoadError.
    """
    header, tensors = read_checkpoint(path)
    stored = ModelConfig.from_dict(header["config"])
    if config is not None and config.to_dict() != stored.to_dict():
        diff = sorted(k for k, v in config.to_dict().items() if header["config"].get(k) != v)
        raise LoadError(f"{path}: checkpoint config differs from requested config in {diff}")
    if expected_tag is not None and header.get("tag") != expected_tag:
        raise LoadError(f"{path}: expected tag {expected_tag!r}, found {header.get('tag')!r}")
    model = CLAD(stored)
    load_into(model, tensors, path)
    return model, header


def load_into(model: CLAD, tensors: dict, source="checkpoint") -> None:
    own = model.state_dict()
    missing = sorted(set(own) - set(tensors))
    unexpected = sorted(set(tensors) - set(own))
    if missing or unexpected:
        raise LoadError(f"{source}: missing {missing}, unexpected {unexpected}")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise LoadError(f"{source}: {k} has shape {tuple(v.shape)}, model expects {tuple(own[k].shape)}")
    dtype = next(model.parameters()).dtype
    model.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})
