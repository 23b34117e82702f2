"""Binary tensor-entry format shared by model containers and snapshots.

Each entry is, in order: a little-endian uint32 dimension count, that many
little-endian uint64 dimensions, then the row-major payload as little-endian
IEEE-754 float32. Entries are concatenated in the order listed by the
owning JSON manifest; offsets are recomputed by scanning, never stored.
"""

import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import FormatError

_MAX_NDIM = 32


def write_entry(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def write_blob(fh: BinaryIO, arrays: Sequence[np.ndarray]) -> None:
    for arr in arrays:
        write_entry(fh, arr)


def read_entry(fh: BinaryIO) -> np.ndarray:
    offset = fh.tell()
    header = fh.read(4)
    if len(header) < 4:
        raise FormatError("truncated tensor entry header", byte_offset=offset)
    (ndim,) = struct.unpack("<I", header)
    if ndim > _MAX_NDIM:
        raise FormatError(f"implausible dimension count {ndim}", byte_offset=offset)
    dims_raw = fh.read(8 * ndim)
    if len(dims_raw) < 8 * ndim:
        raise FormatError("truncated tensor dimensions", byte_offset=offset + 4)
    shape = struct.unpack(f"<{ndim}Q", dims_raw)
    count = 1
    for d in shape:
        count *= d
    payload_offset = fh.tell()
    payload = fh.read(4 * count)
    if len(payload) < 4 * count:
        raise FormatError(
            "truncated tensor payload", byte_offset=payload_offset + len(payload)
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def read_blob(fh: BinaryIO, names: Sequence[str]) -> dict[str, np.ndarray]:
    """Read ``len(names)`` entries and reject trailing garbage."""
    out = {name: read_entry(fh) for name in names}
    trailer = fh.read(1)
    if trailer:
        raise FormatError("unexpected bytes after final tensor", byte_offset=fh.tell() - 1)
    return out
