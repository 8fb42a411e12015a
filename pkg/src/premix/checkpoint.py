"""``PMCK`` checkpoint files.

Layout (little-endian)::

    b"PMCK" | u32 version | u32 header_len | header (UTF-8 JSON) | float32 blob

The header lists ``{name, shape, offset}`` per tensor (offsets in bytes from
the start of the blob) together with the architecture, epoch and config hash.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from premix.aggregator import AggregatorParams, ArchConfig, param_shapes

MAGIC = b"PMCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: AggregatorParams, epoch: int = 0, config_hash: str = "") -> None:
    entries, chunks, offset = [], [], 0
    for kind, group in (("param", params.tensors), ("buffer", params.buffers)):
        for name, arr in group.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    header = json.dumps(
        {
            "arch": params.config.to_dict(),
            "epoch": int(epoch),
            "config_hash": config_hash,
            "tensors": entries,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path, expect: ArchConfig | None = None) -> tuple[AggregatorParams, dict]:
    """Read a checkpoint; with ``expect`` the stored architecture must match it."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, hlen = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if _HEAD.size + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        meta = json.loads(raw[_HEAD.size : _HEAD.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    blob = raw[_HEAD.size + hlen :]
    arch = meta["arch"]
    cfg = ArchConfig(**{**arch, "projector": tuple(arch["projector"])})
    if expect is not None and cfg != expect:
        raise CheckpointError(
            f"{path}: architecture mismatch (checkpoint {cfg.to_dict()}, configured {expect.to_dict()})"
        )
    shapes = param_shapes(cfg)
    tensors, buffers = {}, {}
    for e in meta["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) * 4
        if e["offset"] + n > len(blob):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the end of the file")
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=e["offset"]).reshape(shape)
        (tensors if e["kind"] == "param" else buffers)[e["name"]] = arr.astype(np.float32)
    if {k: v.shape for k, v in tensors.items()} != shapes:
        raise CheckpointError(f"{path}: stored tensors do not match the architecture")
    return AggregatorParams(cfg, tensors, buffers), meta
