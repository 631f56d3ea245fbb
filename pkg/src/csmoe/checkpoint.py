"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    bytes 0..7    magic b"CSMOECK\\x00"
    bytes 8..11   u32 format version (currently 1)
    bytes 12..15  u32 header length H
    bytes 16..16+H  UTF-8 JSON header
    remainder     float32 little-endian array data

The header holds ``model_config``, ``seed``, ``step``, ``extra`` (free-form,
e.g. the run configuration) and ``arrays``: a list of
``{"name", "group", "shape", "offset", "count"}`` where ``group`` is
``param``, ``adam.m`` or ``adam.v`` and ``offset`` counts bytes from the
start of the data section.  Arrays are stored in C order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import AdamState, Model, ModelConfig, build_model

MAGIC = b"CSMOECK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, opt: AdamState | None = None, extra: dict | None = None) -> None:
    groups = [("param", {k: t.data for k, t in model.named_parameters().items()})]
    if opt is not None:
        groups += [("adam.m", opt.m), ("adam.v", opt.v)]
    arrays, chunks, offset = [], [], 0
    for group, named in groups:
        for name, arr in named.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            arrays.append({"name": name, "group": group, "shape": list(data.shape),
                           "offset": offset, "count": int(data.size)})
            chunks.append(data.tobytes())
            offset += data.nbytes
    header = {"model_config": model.cfg.to_dict(), "seed": model.seed,
              "step": opt.step if opt is not None else 0, "extra": extra or {}, "arrays": arrays}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(raw)) + raw)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<II", head[8:])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(n).decode("utf-8"))
    header["_data_start"] = 16 + n
    return header


def load_checkpoint(path) -> tuple[Model, AdamState, dict]:
    """Rebuild the model (float32) and optimiser state stored in ``path``."""
    header = read_header(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = build_model(cfg, header["seed"], dtype=np.float32)
    params = model.named_parameters()
    blob = Path(path).read_bytes()[header["_data_start"]:]
    opt = AdamState(step=header["step"])
    seen = set()
    for a in header["arrays"]:
        arr = np.frombuffer(blob, dtype="<f4", count=a["count"], offset=a["offset"])
        arr = arr.reshape(a["shape"]).astype(np.float32)
        if a["group"] == "param":
            if a["name"] not in params or params[a["name"]].data.shape != arr.shape:
                raise CheckpointError(f"parameter {a['name']} does not match the configuration")
            params[a["name"]].data = arr
            seen.add(a["name"])
        elif a["group"] == "adam.m":
            opt.m[a["name"]] = arr
        elif a["group"] == "adam.v":
            opt.v[a["name"]] = arr
        else:
            raise CheckpointError(f"unknown array group {a['group']!r}")
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    return model, opt, header
