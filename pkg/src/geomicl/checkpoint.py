"""Binary checkpoints: magic, uint32 version, uint64 header length, a JSON
header (config, tensor table, step count) and a raw little-endian float32
payload.  Optimizer moments are stored as ``adam.m.*`` / ``adam.v.*``."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, param_shapes
from .optim import OptimizerState

MAGIC = b"GEOMCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, state: OptimizerState | None, path) -> Path:
    path = Path(path)
    named = list(params.tensors.items())
    if state is not None:
        named += [(f"adam.m.{k}", v) for k, v in state.m.items()]
        named += [(f"adam.v.{k}", v) for k, v in state.v.items()]
    table, chunks, offset = [], [], 0
    for name, arr in named:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "config": params.config.to_dict(),
        "step": state.step if state is not None else 0,
        "optimizer": None
        if state is None
        else {"peak_lr": state.peak_lr, "warmup_steps": state.warmup_steps, "total_steps": state.total_steps},
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(b"".join(chunks))
    return path


def load_checkpoint(path) -> tuple[ModelParams, OptimizerState | None]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated file")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: version mismatch ({version} != {VERSION})")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size : start])
        cfg = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = data[start:]

    expected = param_shapes(cfg)
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        base = name.split(".", 2)[2] if name.startswith("adam.") else name
        if base not in expected:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        if shape != expected[base]:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: {shape} vs {expected[base]}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        off = entry["offset"]
        if entry["nbytes"] != nbytes:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: byte count {entry['nbytes']}")
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)

    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    params = ModelParams(cfg, {k: tensors[k] for k in expected})
    state = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        state = OptimizerState(
            o["peak_lr"],
            o["warmup_steps"],
            o["total_steps"],
            int(header["step"]),
            {k: tensors[f"adam.m.{k}"] for k in expected},
            {k: tensors[f"adam.v.{k}"] for k in expected},
        )
    return params, state
