import os
import struct
import zlib

import numpy as np
import pytest

from data import FeatureRef
from errors import (ChecksumError, DtypeError, MissingFileError, RangeError, TensorFileError, TruncatedFileError,
                    VersionError)
from tensor_io import MAGIC, FeatureStore, decode_tensor, encode_tensor, read_feature_row, read_tensor, write_tensor


def test_header_layout():
    blob = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert blob[:8] == MAGIC
    version, dtype_code, ndim = struct.unpack_from('<IBB', blob, 8)
    assert (version, dtype_code, ndim) == (1, 0, 2)
    assert struct.unpack_from('<2Q', blob, 14) == (2, 3)
    payload = blob[30:30 + 24]
    assert struct.unpack_from('<I', blob, 54)[0] == zlib.crc32(payload)
    assert len(blob) == 58


def test_row_round_trip_is_bit_exact(tmp_path):
    path = str(tmp_path / 'feats.glapt')
    write_tensor(path, np.array([[1.5, -2.0]], dtype=np.float32))
    row = read_feature_row(FeatureRef(path, 0))
    assert row.dtype == np.float32
    assert row.tobytes() == np.array([1.5, -2.0], dtype=np.float32).tobytes()


def test_three_dimensional_rows_are_frame_matrices(tmp_path):
    path = str(tmp_path / 'frames.glapt')
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_tensor(path, data)
    np.testing.assert_array_equal(FeatureStore().read_row(FeatureRef(path, 1)), data[1])


def test_row_out_of_range(tmp_path):
    path = str(tmp_path / 'feats.glapt')
    write_tensor(path, np.zeros((3, 2), dtype=np.float32))
    with pytest.raises(RangeError):
        read_feature_row(FeatureRef(path, 3))


def test_flipped_payload_byte(tmp_path):
    blob = bytearray(encode_tensor(np.ones((2, 2), dtype=np.float32)))
    blob[32] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_tensor(bytes(blob))


def test_truncated_payload():
    blob = encode_tensor(np.ones((4, 4), dtype=np.float32))
    with pytest.raises(TruncatedFileError):
        decode_tensor(blob[:-10])


def test_trailing_bytes_rejected():
    blob = encode_tensor(np.ones((4, 4), dtype=np.float32))
    with pytest.raises(TensorFileError, match='trailing'):
        decode_tensor(blob + b'\x00')


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        read_tensor(str(tmp_path / 'absent.glapt'))
    with pytest.raises(MissingFileError):
        FeatureStore().read_row(FeatureRef(str(tmp_path / 'absent.glapt'), 0))


def test_unknown_dtype():
    blob = bytearray(encode_tensor(np.ones(2, dtype=np.float32)))
    blob[12] = 7
    with pytest.raises(DtypeError):
        decode_tensor(bytes(blob))


def test_newer_version():
    blob = bytearray(encode_tensor(np.ones(2, dtype=np.float32)))
    struct.pack_into('<I', blob, 8, 99)
    with pytest.raises(VersionError):
        decode_tensor(bytes(blob))


def test_bad_magic():
    blob = b'NOTMAGIC' + encode_tensor(np.ones(2, dtype=np.float32))[8:]
    with pytest.raises(TensorFileError):
        decode_tensor(blob)


def test_store_caches_decoded_files(tmp_path):
    path = str(tmp_path / 'feats.glapt')
    write_tensor(path, np.ones((2, 2), dtype=np.float32))
    store = FeatureStore()
    store.read_row(FeatureRef(path, 0))
    os.remove(path)
    np.testing.assert_array_equal(store.read_row(FeatureRef(path, 1)), [1.0, 1.0])


def test_float64_input_is_stored_as_float32(tmp_path):
    path = str(tmp_path / 'w.glapt')
    write_tensor(path, np.array([0.1, 0.2]))
    assert read_tensor(path).dtype == np.float32
