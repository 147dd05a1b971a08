"""Single-file named-tensor checkpoints.

Layout::

    b"MBCKPT01"                      8-byte magic
    uint64 little-endian             header length H
    H bytes UTF-8 JSON               {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    raw little-endian tensor data    concatenated in header order

``meta`` carries the architecture config, setup id, epoch and seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"MBCKPT01"
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def serialize_state(state: dict, meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def deserialize_state(blob: bytes) -> tuple[OrderedDict, dict]:
    if blob[:8] != MAGIC:
        raise DataError("not a morphobench checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    data = memoryview(blob)[16 + hlen:]
    state = OrderedDict()
    for e in header["tensors"]:
        arr = np.frombuffer(data[e["offset"]:e["offset"] + e["nbytes"]], dtype=e["dtype"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return state, header["meta"]


def save_checkpoint(path: str | os.PathLike, module: torch.nn.Module, meta: dict) -> str:
    """Write ``module.state_dict()`` and return the file's sha256."""
    blob = serialize_state(module.state_dict(), meta)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | os.PathLike) -> tuple[OrderedDict, dict]:
    return deserialize_state(Path(path).read_bytes())


def file_checksum(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def flat_parameters(module: torch.nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(module.parameters()).detach().clone()
