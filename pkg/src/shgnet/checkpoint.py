"""Binary checkpoint format.

Layout::

    b"DNCK" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The header carries the model config, the freeze mode and mask, optional
optimizer scalars, run metadata, and a tensor directory
``[{name, shape, offset, nbytes}]``. Payloads are little-endian float32 in
directory order; offsets are relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import OptimizerState
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .models import ModelConfig, ResNet, apply_freeze_mask, build_model

MAGIC = b"DNCK"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_checkpoint(model: ResNet, path, optimizer: Optional[OptimizerState] = None,
                    seed: Optional[int] = None, step: int = 0, extra: Optional[dict] = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = list(model.state_dict().items())
    opt_header = None
    if optimizer is not None:
        opt_header = {k: getattr(optimizer, k)
                      for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "t")}
        for name in sorted(optimizer.m):
            tensors.append((f"optim.m.{name}", optimizer.m[name]))
            tensors.append((f"optim.v.{name}", optimizer.v[name]))

    directory, offset = [], 0
    for name, arr in tensors:
        nbytes = arr.size * 4
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": model.config.to_dict(),
        "freeze_mode": model.freeze_mode,
        "freeze_mask": model.freeze_mask(),
        "optimizer": opt_header,
        "seed": seed,
        "step": step,
        "extra": extra or {},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its header and a name -> float32 array map."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointTruncatedError(f"{path}: file ends inside the preamble")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    if len(raw) < 12 + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
    payload = memoryview(raw)[12 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        if entry["nbytes"] != int(np.prod(shape, dtype=np.int64)) * 4:
            raise CheckpointShapeError(
                f"{path}: {entry['name']} declares shape {shape} but {entry['nbytes']} bytes")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointTruncatedError(f"{path}: payload for {entry['name']} truncated")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=_LE_F32).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
    return header, tensors


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (and optionally its optimizer state) from ``path``."""
    header, tensors = read_checkpoint(path)
    model = build_model(ModelConfig.from_dict(header["config"]))
    state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    own = model.state_dict()
    for name, arr in state.items():
        if name not in own or own[name].shape != arr.shape:
            raise CheckpointShapeError(f"{path}: tensor {name} {arr.shape} does not fit the model")
    if set(own) - set(state):
        raise CheckpointShapeError(f"{path}: missing tensors {sorted(set(own) - set(state))[:5]}")
    model.load_state_dict(state)
    apply_freeze_mask(model, header["freeze_mask"], header["freeze_mode"])
    if not with_optimizer:
        return model
    opt = None
    if header.get("optimizer"):
        opt = OptimizerState(**header["optimizer"])
        for name, arr in tensors.items():
            if name.startswith("optim.m."):
                opt.m[name[len("optim.m."):]] = arr
            elif name.startswith("optim.v."):
                opt.v[name[len("optim.v."):]] = arr
    return model, opt, header
