"""Binary parameter container.

Layout (all integers little-endian):

    magic   4 bytes  b"SMFG"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated:
        name_len u16, name utf-8 bytes
        ndim     u16, dims u32 each
        data     float64 little-endian, row-major

Hyperparameters travel in a JSON sidecar written next to the container by
the callers (model manifest); this module only moves named arrays.
"""

import struct

import numpy as np

from .errors import ContractError

MAGIC = b"SMFG"
VERSION = 1


def write_params(path, entries):
    """Write ordered (name, array) pairs; arrays are stored as float64."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<H", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def read_params(path):
    """Read a container back into an ordered dict of name -> float64 array."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ContractError(f"{path}: not a parameter container (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ContractError(f"{path}: unsupported container version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<H", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
            out[name] = data.reshape(shape)
    return out
