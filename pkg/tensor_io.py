"""
GLAP-TENSOR binary files.

Layout (little-endian):
    magic   8 bytes  b"GLAPTNSR"
    version u32
    dtype   u8       0 = float32
    ndim    u8
    dims    ndim x u64
    payload prod(dims) x 4 bytes, row-major
    crc32   u32      IEEE CRC32 of the payload bytes
"""
import os
import struct
import zlib

import numpy as np

from config import TENSOR_FORMAT_VERSION
from errors import (ChecksumError, DtypeError, MissingFileError, RangeError, TensorFileError, TruncatedFileError,
                    VersionError)

MAGIC = b"GLAPTNSR"
DTYPE_CODES = {0: np.dtype('<f4')}
_HEADER = struct.Struct('<8sIBB')


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array), dtype='<f4')
    if arr.ndim < 1 or arr.ndim > 255:
        raise DtypeError(f"cannot store a {arr.ndim}-d tensor")
    payload = arr.tobytes(order='C')
    header = _HEADER.pack(MAGIC, TENSOR_FORMAT_VERSION, 0, arr.ndim)
    dims = struct.pack(f'<{arr.ndim}Q', *arr.shape)
    return header + dims + payload + struct.pack('<I', zlib.crc32(payload) & 0xFFFFFFFF)


def decode_tensor(blob: bytes, source="<bytes>") -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{source}: header truncated")
    magic, version, dtype_code, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TensorFileError(f"{source}: bad magic {magic!r}")
    if version > TENSOR_FORMAT_VERSION:
        raise VersionError(f"{source}: tensor format version {version} is newer than {TENSOR_FORMAT_VERSION}")
    if dtype_code not in DTYPE_CODES:
        raise DtypeError(f"{source}: unsupported dtype code {dtype_code}")
    dtype = DTYPE_CODES[dtype_code]

    offset = _HEADER.size
    if len(blob) < offset + 8 * ndim:
        raise TruncatedFileError(f"{source}: dims truncated")
    dims = struct.unpack_from(f'<{ndim}Q', blob, offset)
    offset += 8 * ndim

    n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) < offset + n_bytes + 4:
        raise TruncatedFileError(f"{source}: expected {n_bytes} payload bytes plus checksum, file is short")
    if len(blob) > offset + n_bytes + 4:
        raise TensorFileError(f"{source}: {len(blob) - offset - n_bytes - 4} trailing byte(s) after checksum")
    payload = blob[offset:offset + n_bytes]
    (stored_crc,) = struct.unpack_from('<I', blob, offset + n_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{source}: CRC32 mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_tensor(path, array):
    """Write a float32 tensor; parent directories are created."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as fh:
        fh.write(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, 'rb') as fh:
            blob = fh.read()
    except OSError as e:
        raise MissingFileError(f"{path}: {e.strerror or e}") from None
    return decode_tensor(blob, source=path)


class FeatureStore:
    """Read-only cache of decoded GLAP-TENSOR files keyed by path."""

    def __init__(self, base_dir=None):
        self.base_dir = base_dir
        self.cache = {}

    def resolve(self, path):
        if self.base_dir and not os.path.isabs(path):
            return os.path.join(self.base_dir, path)
        return path

    def load(self, path):
        full = self.resolve(path)
        if full not in self.cache:
            self.cache[full] = read_tensor(full)
        return self.cache[full]

    def read_row(self, ref):
        """Row `ref.row` of the file: a vector for 2-d files, a T x F matrix for 3-d files."""
        tensor = self.load(ref.path)
        if not 0 <= ref.row < tensor.shape[0]:
            raise RangeError(f"{ref.path}: row {ref.row} out of range [0, {tensor.shape[0]})")
        return tensor[ref.row]


def read_feature_row(ref, store: FeatureStore = None):
    store = store or FeatureStore()
    return store.read_row(ref)
