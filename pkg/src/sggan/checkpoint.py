"""Self-describing parameter container.

Layout::

    b"SGGAN1\\n"  magic + version
    8 bytes       little-endian header length
    header        UTF-8 JSON: {"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}], "sha256": ...}
    payload       raw little-endian tensor bytes in header order

The header is serialized with sorted keys and no timestamps, so equal
contents always produce equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from sggan.errors import LoadError

MAGIC = b"SGGAN1\n"

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
    "uint8": (torch.uint8, np.uint8),
}


def _to_numpy(t) -> np.ndarray:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    name = str(arr.dtype)
    if name not in _DTYPES:
        raise TypeError(f"unsupported dtype {name}")
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return np.array(arr, dtype=arr.dtype.newbyteorder("<"), order="C")


def encode(tensors: Mapping[str, object], meta: Mapping) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes()
        index.append(
            {"name": name, "dtype": str(arr.dtype.newbyteorder("=")), "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps(
        {"meta": meta, "tensors": index, "sha256": hashlib.sha256(payload).hexdigest()},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + payload


def decode(blob: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if not blob.startswith(MAGIC):
        raise LoadError("not an SGGAN1 container (bad magic header)")
    pos = len(MAGIC)
    try:
        (hlen,) = struct.unpack_from("<Q", blob, pos)
        header = json.loads(blob[pos + 8 : pos + 8 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"corrupt container header: {exc}") from exc
    payload = blob[pos + 8 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise LoadError("payload checksum mismatch (truncated or corrupted file)")
    tensors = {}
    for item in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[item["dtype"]]
        raw = payload[item["offset"] : item["offset"] + item["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(np_dtype).newbyteorder("<")).reshape(item["shape"])
        tensors[item["name"]] = torch.from_numpy(arr.astype(np_dtype, copy=True))
    return tensors, header["meta"]


def save(path, tensors: Mapping[str, object], meta: Mapping) -> None:
    """Atomic write: a reader never observes a half-written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_checksum(tensors: Mapping[str, torch.Tensor]) -> str:
    """Digest of a parameter mapping, for frozen/changed assertions."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(_to_numpy(tensors[name]).tobytes())
    return h.hexdigest()
