"""Checkpoint file format.

Layout: 8-byte magic "NTPSEG01", an 8-byte little-endian unsigned header
length, a UTF-8 JSON header, then raw little-endian float32 tensor data
concatenated in header index order. The header carries every config section,
the tensor index (name, shape, byte offset into the data region), the HET
memory as sorted (sample_id, position, token ids) records, and the trainer
state needed to resume bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ntpseg.model import ModelConfig, ModelParams

MAGIC = b"NTPSEG01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, configs: dict,
                    opt_tensors: dict[str, np.ndarray] | None = None,
                    het_records: list | None = None,
                    trainer_state: dict | None = None) -> None:
    """configs: section name -> dataclass (or plain dict) of settings."""
    tensors: dict[str, np.ndarray] = dict(params.tensors)
    for name, arr in (opt_tensors or {}).items():
        tensors[name] = arr
    index, offset = [], 0
    for name, arr in tensors.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"checkpoint tensors are float32; {name} is {arr.dtype}")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "config": {k: (asdict(v) if not isinstance(v, dict) else v) for k, v in configs.items()},
        "tensors": index,
        "het_memory": het_records or [],
        "trainer_state": trainer_state or {},
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (header dict, tensors dict[str, float32 array])."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return header, tensors


def params_from_checkpoint(header: dict, tensors: dict) -> ModelParams:
    cfg = ModelConfig(**header["config"]["model"])
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    return ModelParams(cfg, model_tensors)
