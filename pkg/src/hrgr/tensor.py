"""Dense tensors, fixed-order matrix products and the ``.hrgt`` container.

Tensors are plain :class:`numpy.ndarray` objects restricted to three dtypes
(``float32``, ``float64`` and ``uint32`` for region indices), always
C-contiguous (row-major), with every dimension at least 1.

The ``.hrgt`` layout is::

    magic   4 bytes   b"HRGT"
    version uint8     1
    dtype   uint8     0=float32, 1=float64, 2=uint32
    ndim    uint8
    dims    ndim x uint64 little-endian
    payload row-major little-endian elements
"""

import os
import struct

import numpy as np

__all__ = [
    "TensorFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "UnsupportedDtypeError",
    "TruncatedPayloadError",
    "ShapeError",
    "DTYPE_CODES",
    "as_tensor",
    "matmul",
    "resize_nearest_index",
    "save",
    "load",
]

MAGIC = b"HRGT"
VERSION = 1

DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint32): 2,
}
_CODE_DTYPES = {code: dt.newbyteorder("<") for dt, code in DTYPE_CODES.items()}

# elements per chunk of the (p, q, r) product buffer used by matmul
_MATMUL_CHUNK = 1 << 21


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TensorFormatError(ValueError):
    """Base class for malformed ``.hrgt`` files."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


def as_tensor(x, dtype=None):
    """Return ``x`` as a C-contiguous tensor of a supported dtype."""
    arr = np.asarray(x) if dtype is None else np.asarray(x, dtype=dtype)
    if arr.dtype not in DTYPE_CODES:
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            if arr.size and arr.min() < 0:
                raise ValueError("index tensors must be non-negative")
            arr = arr.astype(np.uint32)
        else:
            raise UnsupportedDtypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a, b):
    """Matrix product with a sequential summation order over the inner axis.

    ``out[i, j]`` is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``,
    the same order as a naive triple loop, so results are bitwise
    reproducible and independent of any BLAS threading.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} x {b.dtype}")
    if not np.issubdtype(a.dtype, np.floating):
        raise ShapeError(f"matmul needs float operands, got {a.dtype}")
    p, q = a.shape
    r = b.shape[1]
    out = np.empty((p, r), dtype=a.dtype)
    if q == 1:
        np.multiply(a, b, out=out)
        return out
    rows = max(1, _MATMUL_CHUNK // max(1, q * r))
    for start in range(0, p, rows):
        stop = min(p, start + rows)
        prod = a[start:stop, :, None] * b[None, :, :]
        # add.accumulate is a strict left-to-right running sum
        np.add.accumulate(prod, axis=1, out=prod)
        out[start:stop] = prod[:, -1, :]
    return out


def resize_nearest_index(j, target_h, target_w):
    """Nearest-neighbour resize of a 2-D label map.

    Output cell ``(y, x)`` copies input cell
    ``(floor(y * h / target_h), floor(x * w / target_w))``.
    """
    j = np.asarray(j)
    if j.ndim != 2:
        raise ShapeError(f"index map must be 2-D, got shape {j.shape}")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target size must be >= 1, got {target_h}x{target_w}")
    h, w = j.shape
    rows = (np.arange(target_h, dtype=np.int64) * h) // target_h
    cols = (np.arange(target_w, dtype=np.int64) * w) // target_w
    return np.ascontiguousarray(j[rows[:, None], cols[None, :]])


def save(t, path):
    """Write ``t`` to ``path`` in ``.hrgt`` format."""
    t = as_tensor(t)
    if t.ndim > 255:
        raise ShapeError("at most 255 dimensions can be stored")
    code = DTYPE_CODES[t.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = t.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load(path):
    """Read a tensor written by :func:`save`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{os.fspath(path)}: bad magic {raw[:4]!r}")
    if len(raw) < 7:
        raise TruncatedPayloadError(f"{os.fspath(path)}: header truncated")
    version, code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{os.fspath(path)}: version {version}")
    if code not in _CODE_DTYPES:
        raise UnsupportedDtypeError(f"{os.fspath(path)}: dtype code {code}")
    offset = 7 + 8 * ndim
    if len(raw) < offset:
        raise TruncatedPayloadError(f"{os.fspath(path)}: dims truncated")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 7)
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = count * dtype.itemsize
    if len(raw) - offset != expected:
        raise TruncatedPayloadError(
            f"{os.fspath(path)}: payload has {len(raw) - offset} bytes, "
            f"expected {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))
