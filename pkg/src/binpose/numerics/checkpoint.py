"""BPCK checkpoint files: named little-endian float32 tensors."""
import struct

import numpy as np

from ..errors import DataError

MAGIC = b"BPCK"
VERSION = 1


def save_checkpoint(path, tensors):
    """Write ``{name: array}`` in sorted name order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path, expected_shapes=None):
    """Read a checkpoint; optionally validate it against ``{name: shape}``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not a BPCK checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        tensors[name] = arr.astype(np.float32)
    if expected_shapes is not None:
        validate_shapes(tensors, expected_shapes, path)
    return tensors


def validate_shapes(tensors, expected_shapes, source="checkpoint"):
    missing = sorted(set(expected_shapes) - set(tensors))
    if missing:
        raise DataError(f"{source}: missing tensors {missing[:5]}")
    for name, shape in expected_shapes.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise DataError(
                f"{source}: tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                f"architecture expects {tuple(shape)}")
