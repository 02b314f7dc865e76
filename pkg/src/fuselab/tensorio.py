"""Binary tensor dump format and named-parameter checkpoints.

Single-tensor records use the FLTENS1 layout: the 7-byte magic ``FLTENS1``,
a little-endian u32 rank, one u32 extent per dimension, then the row-major
float64 payload (little-endian). Checkpoints are a JSON manifest (names,
shapes, metadata) followed by the FLTENS1 records in manifest order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, StateError

TENSOR_MAGIC = b"FLTENS1"
CHECKPOINT_MAGIC = b"FLCKPT1"


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return header + arr.astype("<f8").tobytes()


def read_tensor_from(stream) -> np.ndarray:
    magic = stream.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise StateError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", stream.read(4))
    shape = struct.unpack(f"<{rank}I", stream.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise StateError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def dump_tensor(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_from(fh)


def save_checkpoint(path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a manifest + FLTENS1 container of named arrays."""
    manifest = {
        "entries": [{"name": n, "shape": list(a.shape)} for n, a in named.items()],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in named:
            fh.write(tensor_bytes(named[name]))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (named arrays, metadata) from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise StateError(f"bad checkpoint magic {magic!r}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        named = {}
        for entry in manifest["entries"]:
            arr = read_tensor_from(fh)
            if list(arr.shape) != entry["shape"]:
                raise DimensionError(
                    f"checkpoint entry '{entry['name']}': shape {list(arr.shape)} != manifest {entry['shape']}")
            named[entry["name"]] = arr
    return named, manifest.get("meta", {})


def checkpoint_roundtrip_ok(named: dict[str, np.ndarray], path) -> bool:
    """Convenience: save then reload and compare bitwise."""
    save_checkpoint(path, named)
    loaded, _ = load_checkpoint(path)
    return all(np.array_equal(loaded[k], v) and loaded[k].tobytes() == v.tobytes()
               for k, v in named.items())


def state_hash(named: dict[str, np.ndarray], prefix: str = "") -> str:
    """SHA-256 over the sorted named arrays matching ``prefix`` (byte-exact)."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(named):
        if not name.startswith(prefix):
            continue
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(named[name], dtype="<f8").tobytes())
    return h.hexdigest()


def read_tensor_bytes(data: bytes) -> np.ndarray:
    return read_tensor_from(io.BytesIO(data))
