"""Model archive: a flat named-tensor file with a versioned JSON header.

Layout::

    b"PDARCHV\\0"            8-byte magic
    uint32 LE                format version
    uint64 LE                header length in bytes
    header                   UTF-8 JSON, sorted keys
    payload                  float64 LE tensors, row-major, in header order

The header lists each tensor's name, shape and byte offset, and carries
the resolved training config (plus its hash), the schema text and
fingerprint, the standardization statistics and any extra metadata. No
timestamps are written, so identical models give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .data import NormalizationStats
from .errors import SchemaError
from .model import ProtoDoctor
from .schema import Schema, parse_schema

MAGIC = b"PDARCHV\0"
VERSION = 1


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], header_extra: dict | None = None) -> None:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes(order="C")
        chunks.append(blob)
        offset += len(blob)
    header = dict(header_extra or {})
    header["tensors"] = index
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in chunks:
            fh.write(blob)


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise SchemaError(f"{path}: not a model archive")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise SchemaError(f"{path}: unsupported archive version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=start)
        tensors[entry["name"]] = arr.reshape(tuple(entry["shape"])).astype(np.float64)
    return tensors, header


@dataclass
class ModelBundle:
    model: ProtoDoctor
    config: TrainConfig
    schema: Schema
    stats: NormalizationStats
    metadata: dict = field(default_factory=dict)


def save_model(path: str | Path, model: ProtoDoctor, schema: Schema, stats: NormalizationStats,
               metadata: dict | None = None) -> None:
    tensors = {n: t.detach().cpu().numpy() for n, t in model.state_dict().items()}
    cfg = model.config
    header = {
        "format": "protodoctor-archive",
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "schema_text": schema.to_text(),
        "schema_name": schema.name,
        "schema_fingerprint": schema.fingerprint(),
        "stats": stats.to_dict(),
        "dims": {"n_in": model.n_in, "n_demo": model.n_demo, "channel_groups": model.channel_groups},
        "metadata": metadata or {},
        "trained": bool(getattr(model, "trained", False)),
    }
    write_tensors(path, tensors, header)


def load_model(path: str | Path) -> ModelBundle:
    tensors, header = read_tensors(path)
    cfg = TrainConfig(**header["config"])
    schema = parse_schema(header["schema_text"], name=header.get("schema_name", "custom"))
    if schema.fingerprint() != header["schema_fingerprint"]:
        raise SchemaError(f"{path}: schema fingerprint mismatch")
    dims = header["dims"]
    model = ProtoDoctor(cfg, dims["n_in"], dims["n_demo"], dims["channel_groups"])
    state = {n: torch.from_numpy(a.copy()) for n, a in tensors.items()}
    model.load_state_dict(state)
    model.trained = bool(header.get("trained", False))
    model.eval()
    return ModelBundle(model, cfg, schema, NormalizationStats.from_dict(header["stats"]),
                       header.get("metadata", {}))
