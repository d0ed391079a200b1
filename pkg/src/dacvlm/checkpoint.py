"""Checkpoint container and its on-disk format.

Layout: an 8-byte little-endian unsigned manifest length, the UTF-8 JSON
manifest, then every tensor's float64 little-endian payload concatenated in
manifest order. Each manifest entry records ``name``, ``shape`` and the
byte ``offset``/``len`` of its payload relative to the end of the manifest.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint."""


@dataclass
class Checkpoint:
    config: dict
    tensors: Dict[str, np.ndarray]
    provenance: dict = field(default_factory=lambda: {"stage": "init", "step": 0, "seed": 0})
    metadata: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.config.get("variant", "dense")

    def manifest(self) -> dict:
        entries, offset = [], 0
        for name, arr in self.tensors.items():
            nbytes = int(arr.size) * 8
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64", "offset": offset, "len": nbytes})
            offset += nbytes
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "tensors": entries,
            "provenance": self.provenance,
            "metadata": self.metadata,
        }


def write_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = json.dumps(ckpt.manifest(), sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def _validate_manifest(man: dict) -> int:
    for key in ("format_version", "config", "tensors", "provenance"):
        if key not in man:
            raise CheckpointError(f"manifest missing field {key!r}")
    if man["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {man['format_version']}")
    names, offset = set(), 0
    for e in man["tensors"]:
        if e["name"] in names:
            raise CheckpointError(f"duplicate tensor name {e['name']!r}")
        names.add(e["name"])
        if e.get("dtype", "float64") != "float64":
            raise CheckpointError(f"{e['name']}: unsupported dtype {e['dtype']}")
        expect = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["len"] != expect:
            raise CheckpointError(f"{e['name']}: payload length {e['len']} does not match shape {e['shape']}")
        if e["offset"] != offset:
            raise CheckpointError(f"{e['name']}: offset {e['offset']} breaks contiguous layout (expected {offset})")
        offset += e["len"]
    return offset


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _LEN.size:
        raise CheckpointError(f"{path}: file too short for a manifest header")
    (mlen,) = _LEN.unpack_from(raw, 0)
    if _LEN.size + mlen > len(raw):
        raise CheckpointError(f"{path}: manifest truncated")
    try:
        man = json.loads(raw[_LEN.size : _LEN.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    total = _validate_manifest(man)
    payload = memoryview(raw)[_LEN.size + mlen :]
    if len(payload) != total:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest expects {total}")
    tensors = {}
    for e in man["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["len"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return Checkpoint(man["config"], tensors, man["provenance"], man.get("metadata", {}))
