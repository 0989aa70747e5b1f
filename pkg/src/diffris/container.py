"""Flat binary container for parameter snapshots.

Layout (all integers little-endian):

    magic   4 bytes  b"DRIS"
    version u32      format version (currently 1)
    count   u32      number of named arrays
    entry * count:
        name_len u32, name utf-8 bytes
        ndim     u32, dims ndim * u32
        data     float32 little-endian, C order

Entries are written in sorted name order so identical state produces
byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DRIS"
VERSION = 1


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float arrays to `path` in the container format."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))


def read_arrays(path) -> dict[str, np.ndarray]:
    """Read a container written by `write_arrays`."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a DRIS container (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
        offset += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        out[name] = arr.copy()
    return out


def state_dict_arrays(state_dict) -> dict[str, np.ndarray]:
    """Convert a torch state dict to container arrays; dots become slashes."""
    arrays = {}
    for key, tensor in state_dict.items():
        arrays[key.replace(".", "/")] = tensor.detach().cpu().numpy().astype(np.float32)
    return arrays


def arrays_to_state_dict(arrays: dict[str, np.ndarray]):
    """Inverse of `state_dict_arrays` (float32 tensors, slash back to dot)."""
    import torch

    return {
        name.replace("/", "."): torch.from_numpy(np.ascontiguousarray(arr))
        for name, arr in arrays.items()
    }
