import struct

import numpy as np
import pytest

from chromaphase import container
from chromaphase.util import (
    DatasetError,
    NotADatasetError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)


def test_header_layout():
    buf = container.encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert buf[:4] == b"ZMDT"
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    assert (version, code, ndim) == (1, 1, 2)
    assert struct.unpack_from("<2Q", buf, 8) == (2, 3)
    assert len(buf) == 8 + 16 + 6 * 4


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_file_is_exact(tmp_path, dtype):
    array = np.random.default_rng(0).standard_normal((3, 5, 7)).astype(dtype)
    path = str(tmp_path / "t.zmdt")
    container.write_tensor(path, array, {"pitch": 5e-7})
    back = container.read_tensor(path, expected_shape=(3, 5, 7))
    assert back.dtype == array.dtype
    assert back.tobytes() == array.tobytes()
    assert container.read_sidecar(path) == {"pitch": 5e-7}


def test_zero_dimensional_tensor():
    back, end = container.decode_tensor(container.encode_tensor(np.asarray(2.5)))
    assert back.shape == ()
    assert float(back) == 2.5


def test_unsupported_dtype():
    with pytest.raises(DatasetError):
        container.encode_tensor(np.zeros(3, dtype=np.int32))


def test_bad_magic():
    with pytest.raises(NotADatasetError):
        container.decode_tensor(b"PNG\x00" + bytes(20))


def test_version_mismatch():
    buf = bytearray(container.encode_tensor(np.zeros(2)))
    buf[4:6] = struct.pack("<H", 9)
    with pytest.raises(VersionMismatchError):
        container.decode_tensor(bytes(buf))


def test_truncated_payload():
    buf = container.encode_tensor(np.zeros((4, 4)))
    with pytest.raises(TruncatedFileError):
        container.decode_tensor(buf[:-1])
    with pytest.raises(TruncatedFileError):
        container.decode_tensor(buf[:10])


def test_shape_mismatch(tmp_path):
    path = str(tmp_path / "t.zmdt")
    container.write_tensor(path, np.zeros((4, 4)))
    with pytest.raises(ShapeMismatchError):
        container.read_tensor(path, expected_shape=(4, 5))


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.zmdt"
    path.write_bytes(container.encode_tensor(np.zeros(3)) + b"\x00")
    with pytest.raises(DatasetError):
        container.read_tensor(str(path))


def test_missing_sidecar(tmp_path):
    path = str(tmp_path / "t.zmdt")
    container.write_tensor(path, np.zeros(3))
    with pytest.raises(DatasetError):
        container.read_sidecar(path)


def test_archive(tmp_path):
    path = str(tmp_path / "a.bin")
    arrays = {"b": np.arange(3.0), "a": np.ones((2, 2), dtype=np.float32)}
    container.write_archive(path, b"TEST", 3, {"step": 4}, arrays)
    metadata, back = container.read_archive(path, b"TEST", 3)
    assert metadata == {"step": 4, "arrays": ["a", "b"]}
    assert set(back) == {"a", "b"}
    for name in arrays:
        assert back[name].tobytes() == arrays[name].tobytes()
    with pytest.raises(VersionMismatchError):
        container.read_archive(path, b"TEST", 4)
    with pytest.raises(NotADatasetError):
        container.read_archive(path, b"ZMDK", 3)
