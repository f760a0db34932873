"""Versioned binary checkpoints: JSON header + flat little-endian float32 vector.

Layout::

    b"GDPD"  | uint32 version | uint32 header_len | header (utf-8 JSON) | float32[n] (LE)

The header records the module kind (``family`` tag), its constructor fields
and the name/shape of every state entry, in the order they are packed.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GDPD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def flat_state(module: torch.nn.Module) -> tuple[list[dict], np.ndarray]:
    entries, chunks = [], []
    for key, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        entries.append({"name": key, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        chunks.append(arr.astype("<f4").ravel())
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    return entries, flat


def to_bytes(kind: str, fields: dict, module: torch.nn.Module) -> bytes:
    entries, flat = flat_state(module)
    header = json.dumps({"family": kind, "fields": fields, "state": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + flat.tobytes()


def read_header(blob: bytes) -> tuple[dict, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode())
    flat = np.frombuffer(blob[12 + hlen:], dtype="<f4")
    return header, flat


def load_state(module: torch.nn.Module, header: dict, flat: np.ndarray) -> None:
    state = module.state_dict()
    offset = 0
    new_state = {}
    for entry in header["state"]:
        name = entry["name"]
        if name not in state:
            raise CheckpointError(f"unexpected state entry {name}")
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = flat[offset:offset + n].reshape(entry["shape"])
        offset += n
        ref = state[name]
        new_state[name] = torch.from_numpy(arr.astype(np.float32)).to(ref.dtype)
    if offset != flat.size:
        raise CheckpointError("parameter vector length does not match header")
    module.load_state_dict(new_state)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)
