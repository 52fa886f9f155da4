"""Binary checkpoint format for named parameter tensors.

Layout (little-endian throughout):

    magic       6 bytes   b"ZRKGC1"
    precision   1 byte    4 (float32) or 8 (float64)
    records     repeated until EOF:
        name_len    uint16
        name        name_len bytes, utf-8
        rank        uint8
        dims        rank * uint32
        values      product(dims) floats of the header precision
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"ZRKGC1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(params: dict[str, Tensor], path: str):
    """Write parameters in insertion order; all must share one dtype."""
    itemsizes = {p.data.dtype.itemsize for p in params.values()}
    if len(itemsizes) != 1:
        raise CheckpointError(f"mixed parameter precisions: {sorted(itemsizes)}")
    itemsize = itemsizes.pop()
    if itemsize not in (4, 8):
        raise CheckpointError(f"unsupported precision: {itemsize}")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", itemsize))
        for name, p in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(p.data, dtype=f"<f{itemsize}").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint back into name -> array (native byte order)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic in {path!r}: {magic!r}")
        (itemsize,) = struct.unpack("<B", fh.read(1))
        if itemsize not in (4, 8):
            raise CheckpointError(f"bad precision flag: {itemsize}")
        dtype = np.dtype(f"<f{itemsize}")
        out: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            (name_len,) = struct.unpack("<H", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            buf = fh.read(count * itemsize)
            if len(buf) != count * itemsize:
                raise CheckpointError(f"truncated record for {name!r}")
            arr = np.frombuffer(buf, dtype=dtype).reshape(dims)
            out[name] = arr.astype(arr.dtype.newbyteorder("="))
        return out


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]):
    """Copy loaded arrays into live parameters (names and shapes must match)."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
