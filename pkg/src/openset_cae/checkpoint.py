"""Binary checkpoint format (``.c2ae``).

Layout: magic ``b"C2AE"``, one version byte (1), little-endian u64 manifest
length, UTF-8 JSON manifest, then every tensor as little-endian row-major
float32 in manifest order. Parameters are float64 in memory, so a saved
model is exact only from the first reload onwards.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .evt import ThresholdModel
from .nets import NetworkDef, OpenSetModel

MAGIC = b"C2AE"
VERSION = 1
_HEADER = len(MAGIC) + 1 + 8


class CheckpointFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def to_bytes(model: OpenSetModel) -> bytes:
    params = model.named_parameters()
    manifest = {
        "network": model.netdef.to_dict(),
        "tensors": [{"name": n, "shape": list(t.shape), "dtype": "float32"} for n, t in params],
        "threshold": None if model.threshold is None else model.threshold.to_dict(),
    }
    if model.meta:
        manifest["meta"] = model.meta
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in params)
    return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(blob)) + blob + payload


def save_checkpoint(model: OpenSetModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def from_bytes(raw: bytes) -> OpenSetModel:
    if len(raw) < _HEADER:
        raise CheckpointFormatError("file shorter than the header", len(raw))
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}", 0)
    if raw[4] != VERSION:
        raise CheckpointFormatError(f"unsupported version {raw[4]}", 4)
    (n,) = struct.unpack("<Q", raw[5:_HEADER])
    if len(raw) < _HEADER + n:
        raise CheckpointFormatError("manifest truncated", len(raw))
    try:
        manifest = json.loads(raw[_HEADER:_HEADER + n].decode("utf-8"))
        netdef = NetworkDef.from_dict(manifest["network"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}", _HEADER) from None

    model = OpenSetModel(netdef)
    expected = dict(model.named_parameters())
    offset = _HEADER + n
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected or expected[name].shape != shape:
            raise CheckpointFormatError(f"tensor {name} {shape} does not fit the network", offset)
        if entry.get("dtype", "float32") != "float32":
            raise CheckpointFormatError(f"tensor {name}: unsupported dtype {entry['dtype']}", offset)
        size = 4 * int(np.prod(shape))
        if len(raw) < offset + size:
            raise CheckpointFormatError(f"payload truncated in tensor {name}", len(raw))
        arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=offset).astype(np.float64)
        expected[name].data = arr.reshape(shape)
        offset += size
    if len(manifest["tensors"]) != len(expected):
        raise CheckpointFormatError("manifest does not list every network tensor", _HEADER)
    if offset != len(raw):
        raise CheckpointFormatError("trailing bytes after the last tensor", offset)
    if manifest.get("threshold") is not None:
        model.threshold = ThresholdModel.from_dict(manifest["threshold"])
    model.meta = manifest.get("meta", {})
    return model


def load_checkpoint(path) -> OpenSetModel:
    return from_bytes(Path(path).read_bytes())
