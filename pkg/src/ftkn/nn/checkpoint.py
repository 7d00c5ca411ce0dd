"""Parameter checkpoint file: little-endian binary.

Layout: magic ``FTKN``, version u32, param count u32, then per parameter
{name length u32, utf-8 name bytes, rank u32, dims u32 each, raw f64 data}.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FTKN"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, params):
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names in checkpoint")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.data, dtype="<f8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns {name: ndarray} in file order."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError("not a FTKN checkpoint: %s" % path)
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError("unsupported checkpoint version %d" % version)
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack("<%dI" % rank, fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = np.array(data, dtype=np.float64)
    return out


def restore_parameters(params, state):
    """Copy arrays from `state` into matching parameters (by name)."""
    for p in params:
        if p.name not in state:
            raise CheckpointError("checkpoint missing parameter %r" % p.name)
        arr = state[p.name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                "shape mismatch for %r: checkpoint %s vs model %s" % (p.name, arr.shape, p.data.shape)
            )
        p.tensor.data = arr.copy()
