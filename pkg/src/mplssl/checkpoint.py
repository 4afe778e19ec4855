"""Checkpoint files: a JSON header followed by a blob of named float32 tensors.

Layout::

    b"MPLSSLCK" | u32 version | u64 header length | header (UTF-8 JSON) | blob

The blob holds every tensor in sorted-name order as
``u16 name length | name | u8 ndim | u32 dims... | float32 data``, little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig
from .errors import InvalidInputError
from .model import Model, ModelConfig

MAGIC = b"MPLSSLCK"
VERSION = 1
OPT_M = "optimizer.m/"
OPT_V = "optimizer.v/"


def _pack_tensors(tensors: dict) -> bytes:
    out = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def _unpack_tensors(blob: bytes) -> dict:
    tensors, pos = {}, 0
    while pos < len(blob):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    return tensors


def save_checkpoint(path, model: Model, state=None, extra: dict | None = None) -> None:
    tensors = dict(model.params)
    header = {
        "schema_version": VERSION,
        "model_config": model.cfg.to_json(),
        "adapter_config": model.adapter_cfg.to_json() if model.adapter_cfg else None,
        "heads": model.heads,
        "freeze_ledger": {k: bool(model.ledger[k]) for k in sorted(model.ledger)},
        "meta": model.meta,
        "step": 0,
        "rng_state": None,
    }
    if state is not None:
        header["step"] = state.step
        header["rng_state"] = state.rng_state
        header["train_state"] = {"last_loss": state.last_loss, "best_loss": state.best_loss}
        tensors.update({OPT_M + k: v for k, v in state.m.items()})
        tensors.update({OPT_V + k: v for k, v in state.v.items()})
    if extra:
        header.update(extra)
    head = json.dumps(header, sort_keys=True).encode()
    data = MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + _pack_tensors(tensors)
    Path(path).write_bytes(data)


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise InvalidInputError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + n].decode())
    return header, _unpack_tensors(raw[20 + n:])


def load_checkpoint(path):
    """Return ``(model, train_state or None, header)``."""
    from .train import TrainState

    header, tensors = read_checkpoint(path)
    params = {k: v for k, v in tensors.items() if not k.startswith("optimizer.")}
    ledger = header["freeze_ledger"]
    if set(ledger) != set(params):
        raise InvalidInputError(f"{path}: freeze ledger does not match stored tensors")
    adapters = AdapterConfig(**header["adapter_config"]) if header["adapter_config"] else None
    model = Model(ModelConfig.from_json(header["model_config"]), params, ledger, adapters,
                  header["heads"], header.get("meta", {}))
    state = None
    if header.get("train_state") is not None:
        state = TrainState(
            step=header["step"],
            m={k[len(OPT_M):]: v for k, v in tensors.items() if k.startswith(OPT_M)},
            v={k[len(OPT_V):]: v for k, v in tensors.items() if k.startswith(OPT_V)},
            rng_state=header["rng_state"],
            last_loss=header["train_state"]["last_loss"],
            best_loss=header["train_state"]["best_loss"],
        )
    return model, state, header


def tensor_hash(arrays: dict, names=None) -> str:
    h = hashlib.sha256()
    for name in sorted(names if names is not None else arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def frozen_hash(model: Model) -> str:
    return tensor_hash(model.params, [n for n, t in model.ledger.items() if not t])
