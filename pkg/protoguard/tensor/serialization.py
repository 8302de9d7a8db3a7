"""
``.ten`` tensor files.

Layout: ``b"TEN1"``, one dtype byte, one rank byte, ``rank`` little-endian
u64 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from protoguard.core.errors import ConfigurationError, ContractError

TEN_MAGIC = b"TEN1"

DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
}
_CODE_BY_KIND = {np.dtype(v).newbyteorder("=").str: k for k, v in DTYPE_CODES.items()}


def _dtype_code(array: np.ndarray) -> int:
    key = array.dtype.newbyteorder("=").str
    if key not in _CODE_BY_KIND:
        raise ConfigurationError(f"Unsupported tensor dtype {array.dtype}")
    return _CODE_BY_KIND[key]


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _dtype_code(array)
    if array.ndim > 255:
        raise ConfigurationError(f"Rank {array.ndim} does not fit the header")
    header = TEN_MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buffer: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the next offset."""
    if buffer[offset : offset + 4] != TEN_MAGIC:
        raise ContractError(f"Bad tensor magic at offset {offset}")
    code, rank = struct.unpack_from("<BB", buffer, offset + 4)
    if code not in DTYPE_CODES:
        raise ContractError(f"Unknown tensor dtype code {code}")
    cursor = offset + 6
    shape = struct.unpack_from(f"<{rank}Q", buffer, cursor)
    cursor += 8 * rank
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape)) if rank else 1
    end = cursor + count * dtype.itemsize
    if end > len(buffer):
        raise ContractError("Tensor payload truncated")
    array = np.frombuffer(buffer, dtype=dtype, count=count, offset=cursor)
    return array.reshape(shape).astype(dtype.newbyteorder("="), copy=True), end


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    array, end = decode_tensor(data)
    if end != len(data):
        raise ContractError(f"Trailing bytes after tensor in {path}")
    return array
