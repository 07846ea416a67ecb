"""Checkpoint files.

Layout: magic line, little-endian u64 header length, a JSON header (sorted
keys) and the concatenated float64 little-endian array payload. The header
records every array's name, shape and offset plus a SHA-256 of the payload.
Writing the same state twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .expert_net import MoEModel
from .moe_router import RouterState
from .trainer import Trainer, model_from_arrays

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"ANYGRAPH-CKPT\n"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]

    @classmethod
    def from_trainer(cls, trainer: Trainer) -> "Checkpoint":
        meta, arrays = trainer.state()
        return cls(meta, {k: np.array(v, dtype=np.float64) for k, v in arrays.items()})

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_dict(self.meta["config"])

    @property
    def roster(self) -> list[str]:
        return list(self.meta["roster"])

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    def model(self) -> MoEModel:
        return model_from_arrays(self.config, self.arrays)

    def router(self) -> RouterState:
        r = self.meta["router"]
        return RouterState(
            num_experts=r["num_experts"], rho=r["rho"], sample_size=r["sample_size"],
            m=np.array(r["m"], dtype=np.int64), assignment=dict(r["assignment"]),
            route_epoch=r["route_epoch"],
        )

    def trainer(self, datasets, cache=None, log_stream=None) -> Trainer:
        return Trainer.restore(self.meta, self.arrays, datasets, cache=cache, log_stream=log_stream)


def save_checkpoint(ckpt: Checkpoint | Trainer, path: str | Path) -> Path:
    if isinstance(ckpt, Trainer):
        ckpt = Checkpoint.from_trainer(ckpt)
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.arrays):
        raw = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(ckpt.arrays[name])), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": FORMAT_VERSION,
        "meta": ckpt.meta,
        "arrays": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expect: RunConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    With ``expect`` given, the stored model shape must match it.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an anygraph checkpoint")
    pos = len(MAGIC)
    (head_len,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    try:
        header = json.loads(raw[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('version')} (expected {FORMAT_VERSION})"
        )
    payload = raw[pos + head_len:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: checksum failure")
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    ckpt = Checkpoint(header["meta"], arrays)
    if expect is not None:
        have, want = ckpt.config.resolved().model, expect.resolved().model
        if have != want:
            raise CheckpointError(f"config mismatch: checkpoint model {have} vs requested {want}")
    return ckpt
