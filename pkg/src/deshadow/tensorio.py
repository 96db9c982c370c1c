"""Bit-exact binary tensor files.

Layout (all little-endian):
  bytes 0-3   magic "DST1"
  bytes 4-7   ndim, uint32
  then        ndim extents, uint64 each
  then        float32 payload, row-major, 4 * prod(extents) bytes
"""

import struct

import numpy as np

__all__ = ["MAGIC", "TensorFileError", "write_tensor", "read_tensor"]

MAGIC = b"DST1"
_MAX_NDIM = 32
_MAX_ELEMENTS = 1 << 40


class TensorFileError(ValueError):
    """Structured parse failure carrying the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_tensor(path, arr):
    arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TensorFileError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    if len(blob) < 8:
        raise TensorFileError("truncated header: missing ndim field", 4)
    (ndim,) = struct.unpack_from("<I", blob, 4)
    if ndim > _MAX_NDIM:
        raise TensorFileError(f"ndim {ndim} exceeds limit {_MAX_NDIM}", 4)
    dims_end = 8 + 8 * ndim
    if len(blob) < dims_end:
        raise TensorFileError(f"truncated header: expected {ndim} extents", 8)
    dims = struct.unpack_from(f"<{ndim}Q", blob, 8)
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise TensorFileError(f"extents {dims} overflow the element limit", 8)
    expected = 4 * count
    actual = len(blob) - dims_end
    if actual != expected:
        raise TensorFileError(
            f"payload length mismatch: expected {expected} bytes, found {actual}", dims_end)
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=dims_end)
    return data.reshape(dims).copy()
