"""
Binary tensor container shared by the dataset files, solver outputs and
model checkpoints.

Layout (all integers little-endian):

    b"ZMDT"            magic
    u16                format version
    u8                 dtype code (1 = float32, 2 = float64)
    u8                 number of dimensions
    ndim x u64         dimensions
    payload            little-endian values, C order

Metadata that does not belong in the binary header lives in a JSON
sidecar next to the file (`<path>.json`).
"""

import json
import struct

import numpy as np

from chromaphase.util import (
    DatasetError,
    NotADatasetError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

TENSOR_MAGIC = b"ZMDT"
TENSOR_VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
}

CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

_HEADER = struct.Struct("<4sHBB")


def encode_tensor(array):
    """
    Return the bytes of `array` (float32 or float64) in the container
    layout.
    """
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise DatasetError("unsupported tensor dtype: {}", array.dtype)
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, DTYPE_CODES[dtype], array.ndim)
    dims = struct.pack("<{}Q".format(array.ndim), *array.shape)
    return header + dims + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensor(buf, offset=0):
    """
    Decode one tensor from `buf` starting at `offset`. Return the array
    and the offset just past its payload.
    """
    if len(buf) - offset < _HEADER.size:
        if buf[offset : offset + 4] != TENSOR_MAGIC[: len(buf) - offset]:
            raise NotADatasetError("missing tensor magic at byte {}", offset)
        raise TruncatedFileError("tensor header cut off at byte {}", offset)
    magic, version, code, ndim = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise NotADatasetError("bad tensor magic {} at byte {}", magic, offset)
    if version != TENSOR_VERSION:
        raise VersionMismatchError(
            "tensor format version {} (expected {})", version, TENSOR_VERSION
        )
    if code not in CODE_DTYPES:
        raise DatasetError("unknown tensor dtype code {}", code)
    offset += _HEADER.size
    dims_size = 8 * ndim
    if len(buf) - offset < dims_size:
        raise TruncatedFileError("tensor dimensions cut off at byte {}", offset)
    shape = struct.unpack_from("<{}Q".format(ndim), buf, offset)
    offset += dims_size
    dtype = CODE_DTYPES[code]
    nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset < nbytes:
        raise TruncatedFileError(
            "tensor payload needs {} bytes, only {} left", nbytes, len(buf) - offset
        )
    array = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
    return array.reshape(shape).astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def sidecar_path(path):
    return "{}.json".format(path)


def write_tensor(path, array, metadata=None):
    """
    Write `array` to `path`, and `metadata` (a JSON-able dict) to the
    sidecar if given.
    """
    with open(path, "wb") as f:
        f.write(encode_tensor(array))
    if metadata is not None:
        with open(sidecar_path(path), "w") as f:
            json.dump(metadata, f, indent=2, sort_keys=True)
            f.write("\n")


def read_tensor(path, expected_shape=None):
    """
    Read the tensor at `path`. If `expected_shape` is given, raise
    ShapeMismatchError when the stored shape differs. Trailing bytes
    after the payload are rejected.
    """
    with open(path, "rb") as f:
        buf = f.read()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise DatasetError("{} trailing bytes after tensor in {}", len(buf) - end, path)
    if expected_shape is not None and tuple(array.shape) != tuple(expected_shape):
        raise ShapeMismatchError(
            "tensor in {} has shape {}, expected {}", path, array.shape, tuple(expected_shape)
        )
    return array


def read_sidecar(path):
    """
    Return the metadata dict stored next to `path`.
    """
    try:
        with open(sidecar_path(path)) as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError("no sidecar metadata for {}", path) from None


_ARCHIVE_HEADER = struct.Struct("<4sHI")


def write_archive(path, magic, version, metadata, arrays):
    """
    Write a single-file archive: `magic`, u16 `version`, u32 metadata
    length, JSON `metadata` (with the array names added under
    "arrays"), then every array of the `arrays` dict as a tensor, in
    name order.
    """
    names = sorted(arrays)
    metadata = dict(metadata, arrays=names)
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_ARCHIVE_HEADER.pack(magic, version, len(meta_bytes)))
        f.write(meta_bytes)
        for name in names:
            f.write(encode_tensor(arrays[name]))


def read_archive(path, magic, version):
    """
    Read an archive written by `write_archive`. Return the metadata
    dict and the {name: array} dict.
    """
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != magic:
        raise NotADatasetError("{} does not start with {}", path, magic)
    if len(buf) < _ARCHIVE_HEADER.size:
        raise TruncatedFileError("archive header of {} cut off", path)
    _, found, meta_len = _ARCHIVE_HEADER.unpack_from(buf)
    if found != version:
        raise VersionMismatchError("{} has format version {} (expected {})", path, found, version)
    offset = _ARCHIVE_HEADER.size
    if len(buf) < offset + meta_len:
        raise TruncatedFileError("archive metadata of {} cut off", path)
    try:
        metadata = json.loads(buf[offset : offset + meta_len].decode("utf-8"))
    except ValueError as e:
        raise DatasetError("malformed archive metadata in {}: {}", path, e) from None
    offset += meta_len
    arrays = {}
    for name in metadata["arrays"]:
        arrays[name], offset = decode_tensor(buf, offset)
    if offset != len(buf):
        raise DatasetError("{} trailing bytes in {}", len(buf) - offset, path)
    return metadata, arrays
