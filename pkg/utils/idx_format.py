"""
IDX container codec (MNIST-style).

Header: two zero bytes, a dtype byte, an ndim byte, then ndim big-endian u32
extents. The payload is big-endian, row-major. Unsigned-byte payloads are
mapped to [0, 1] by /255 unless ``normalize`` is off (label files).
"""

import struct
from typing import Sequence

import numpy as np

# dtype byte -> (numpy big-endian dtype, item size)
IDX_DTYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}
IDX_CODES = {"u8": 0x08, "i8": 0x09, "i16": 0x0B, "i32": 0x0C, "f32": 0x0D, "f64": 0x0E}
# k/255 * 255 is not always exactly k in float64
U8_TOLERANCE = 1e-6


class IdxFormatError(ValueError):
    """Raised for malformed IDX input; messages name the byte offset."""


def parse_idx(payload: bytes, normalize: bool = True, flatten: bool = True) -> np.ndarray:
    """
    Decode an IDX buffer into a float64 array.

    Args:
        payload: Raw file contents
        normalize: Map u8 payloads to [0, 1] by /255
        flatten: Reshape ndim >= 3 arrays to (N, product of the rest)

    Returns:
        np.ndarray: Decoded values

    Raises:
        IdxFormatError: Bad magic, unsupported dtype, truncated header or payload
    """
    if len(payload) < 4:
        raise IdxFormatError(f"Truncated header: need 4 magic bytes at offset 0, got {len(payload)}")
    if payload[0] != 0 or payload[1] != 0:
        raise IdxFormatError(f"Bad magic at offset 0: expected 00 00, got {payload[0]:02x} {payload[1]:02x}")
    dtype_code, ndim = payload[2], payload[3]
    if dtype_code not in IDX_DTYPES:
        raise IdxFormatError(f"Unsupported dtype byte 0x{dtype_code:02x} at offset 2")
    if ndim == 0:
        raise IdxFormatError("Zero dimensions declared at offset 3")

    header_end = 4 + 4 * ndim
    if len(payload) < header_end:
        raise IdxFormatError(
            f"Truncated header: {ndim} extents need bytes 4..{header_end}, file has {len(payload)} bytes"
        )
    extents = struct.unpack_from(f">{ndim}I", payload, 4)
    dtype, itemsize = IDX_DTYPES[dtype_code]
    expected = int(np.prod(extents)) * itemsize
    actual = len(payload) - header_end
    if actual < expected:
        raise IdxFormatError(f"Truncated payload at offset {header_end}: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise IdxFormatError(f"Trailing data at offset {header_end + expected}: {actual - expected} extra bytes")

    values = np.frombuffer(payload, dtype=dtype, count=int(np.prod(extents)), offset=header_end)
    array = values.astype(np.float64).reshape(extents)
    if dtype_code == 0x08 and normalize:
        array = array / 255.0
    if flatten and array.ndim >= 3:
        array = array.reshape(array.shape[0], -1)
    return array


def serialize_idx(array, dtype: str = "f64", normalize: bool = True) -> bytes:
    """
    Encode an array as IDX; inverse of ``parse_idx`` for 1-D and 2-D arrays.

    With dtype "u8" and ``normalize``, values must be multiples of 1/255 in [0, 1].
    """
    if dtype not in IDX_CODES:
        raise ValueError(f"Unknown IDX dtype {dtype!r}; choose from {sorted(IDX_CODES)}")
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 0 or array.ndim > 255:
        raise ValueError(f"IDX needs 1..255 dimensions, got {array.ndim}")
    code = IDX_CODES[dtype]
    np_dtype = IDX_DTYPES[code][0]

    values = array
    if code == 0x08 and normalize:
        values = array * 255.0
        if np.any(np.abs(values - np.rint(values)) > U8_TOLERANCE):
            raise IdxFormatError("u8 values must be multiples of 1/255 to round-trip exactly")
        values = np.rint(values)
    if np.dtype(np_dtype).kind in "iu":
        info = np.iinfo(np.dtype(np_dtype))
        if np.any(values != np.rint(values)) or values.min() < info.min or values.max() > info.max:
            raise ValueError(f"Values do not fit IDX dtype {dtype}")

    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + values.astype(np_dtype).tobytes()


def image_shape_from_header(payload: bytes) -> Sequence[int]:
    """Trailing extents of an ndim >= 3 image file, e.g. (28, 28)."""
    ndim = payload[3]
    extents = struct.unpack_from(f">{ndim}I", payload, 4)
    return tuple(extents[1:])
