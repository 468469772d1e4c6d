"""Bit-exact volume file I/O: the native CTNV container and a NIfTI-1 subset.

CTNV container (all fields little-endian)::

    offset  size  field
    0       4     magic "CTNV"
    4       4     version, u32 (currently 1)
    8       12    dims, 3 x u32
    20      12    spacing, 3 x f32 (mm)
    32      12    origin, 3 x f32 (mm)
    44      4     dtype tag, u32: 0 = f32, 1 = u8, 2 = f64
    48      -     raw voxel data, x fastest / z slowest

NIfTI-1 subset: single-file ".nii", magic "n+1\\0", little-endian,
datatypes uint8 (2), float32 (16) and float64 (64), no compression, no
extensions; of the orientation fields only pixdim and the qoffset origin are
honored.  Scalar volumes default to the f64 container so write -> read is
bit-exact; f32 output is available explicitly and is lossy for values that
are not single-precision representable.

uint8 files are read as ``LabelVolume`` (codes validated against
{0..13, 100}); float files are read as ``ScalarVolume``.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .volume import LabelVolume, ScalarVolume, VALID_LABEL_CODES

CTNV_MAGIC = b"CTNV"
CTNV_VERSION = 1
CTNV_HEADER_SIZE = 48
NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352

_CTNV_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<u1"), 2: np.dtype("<f8")}
_CTNV_TAG_FOR = {"f32": 0, "u8": 1, "f64": 2}
_NIFTI_DTYPES = {2: np.dtype("<u1"), 16: np.dtype("<f4"), 64: np.dtype("<f8")}
_NIFTI_CODE_FOR = {"u8": 2, "f32": 16, "f64": 64}


class VolumeIOError(Exception):
    """Base class for volume file format errors."""


class MalformedHeaderError(VolumeIOError):
    pass


class TruncatedDataError(VolumeIOError):
    pass


class UnsupportedDataTypeError(VolumeIOError):
    pass


class LabelRangeError(VolumeIOError):
    pass


def _validate_label_stream(flat, data_offset):
    bad = ~np.isin(flat, list(VALID_LABEL_CODES))
    if bad.any():
        idx = int(np.argmax(bad))
        raise LabelRangeError(
            f"out-of-range label {int(flat[idx])} at byte offset {data_offset + idx}"
        )


def _volume_from_stream(flat, dims, spacing, origin, dtype, data_offset):
    data = flat.reshape(dims, order="F")
    if dtype == np.dtype("<u1"):
        _validate_label_stream(flat, data_offset)
        return LabelVolume(data=data, spacing=spacing, origin=origin)
    if not np.all(np.isfinite(data)):
        raise VolumeIOError("scalar volume file contains non-finite values")
    return ScalarVolume(data=data, spacing=spacing, origin=origin)


def _read_ctnv(raw, path):
    if len(raw) < CTNV_HEADER_SIZE:
        raise MalformedHeaderError(
            f"{path}: truncated header, {len(raw)} of {CTNV_HEADER_SIZE} bytes"
        )
    magic, version = struct.unpack_from("<4sI", raw, 0)
    if magic != CTNV_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != CTNV_VERSION:
        raise MalformedHeaderError(
            f"{path}: unsupported container version {version} at byte offset 4"
        )
    dims = struct.unpack_from("<3I", raw, 8)
    if any(d < 1 for d in dims):
        raise MalformedHeaderError(f"{path}: non-positive dims {dims} at byte offset 8")
    spacing = struct.unpack_from("<3f", raw, 20)
    origin = struct.unpack_from("<3f", raw, 32)
    (tag,) = struct.unpack_from("<I", raw, 44)
    if tag not in _CTNV_TAGS:
        raise UnsupportedDataTypeError(
            f"{path}: unknown dtype tag {tag} at byte offset 44"
        )
    dtype = _CTNV_TAGS[tag]
    count = dims[0] * dims[1] * dims[2]
    expected = CTNV_HEADER_SIZE + count * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedDataError(
            f"{path}: truncated data, file ends at byte offset {len(raw)}, "
            f"expected {expected}"
        )
    if len(raw) > expected:
        raise MalformedHeaderError(
            f"{path}: {len(raw) - expected} trailing bytes beyond offset {expected}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=CTNV_HEADER_SIZE)
    return _volume_from_stream(flat, dims, spacing, origin, dtype, CTNV_HEADER_SIZE)


def _read_nifti(raw, path):
    if len(raw) < NIFTI_VOX_OFFSET:
        raise MalformedHeaderError(
            f"{path}: truncated header, {len(raw)} of {NIFTI_VOX_OFFSET} bytes"
        )
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == NIFTI_HEADER_SIZE:
            raise UnsupportedDataTypeError(
                f"{path}: big-endian NIfTI files are not supported"
            )
        raise MalformedHeaderError(
            f"{path}: sizeof_hdr {sizeof_hdr} at byte offset 0, expected 348"
        )
    magic = raw[344:348]
    if magic != b"n+1\0":
        raise MalformedHeaderError(
            f"{path}: bad magic {magic!r} at byte offset 344, expected 'n+1\\0'"
        )
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] < 3 or any(d != 1 for d in dim[4 : dim[0] + 1]):
        raise MalformedHeaderError(
            f"{path}: only 3-D volumes are supported, dim = {dim}"
        )
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise MalformedHeaderError(f"{path}: non-positive dims {dims}")
    (datatype, bitpix) = struct.unpack_from("<2h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDataTypeError(
            f"{path}: unsupported NIfTI datatype {datatype} at byte offset 70"
        )
    dtype = _NIFTI_DTYPES[datatype]
    if bitpix != dtype.itemsize * 8:
        raise MalformedHeaderError(
            f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}"
        )
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(pixdim[1:4])
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise MalformedHeaderError(f"{path}: invalid pixdim spacing {spacing}")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    vox_offset = int(vox_offset)
    if vox_offset < NIFTI_VOX_OFFSET:
        raise MalformedHeaderError(f"{path}: vox_offset {vox_offset} below 352")
    origin = struct.unpack_from("<3f", raw, 268)
    count = dims[0] * dims[1] * dims[2]
    expected = vox_offset + count * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedDataError(
            f"{path}: truncated data, file ends at byte offset {len(raw)}, "
            f"expected {expected}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    return _volume_from_stream(flat, dims, spacing, origin, dtype, vox_offset)


def read_volume(path):
    """Read a CTNV or NIfTI-1 subset file.

    Returns a ``ScalarVolume`` for float data and a ``LabelVolume`` for uint8
    data.  Raises a distinct :class:`VolumeIOError` subclass for malformed
    headers, truncated data, unsupported data types, and out-of-range label
    codes, with byte offsets where applicable.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] == CTNV_MAGIC:
        return _read_ctnv(raw, path)
    if len(raw) >= 4 and struct.unpack_from("<i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        return _read_nifti(raw, path)
    if len(raw) >= 4 and struct.unpack_from(">i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        raise UnsupportedDataTypeError(f"{path}: big-endian NIfTI files are not supported")
    raise MalformedHeaderError(f"{path}: unrecognized file format")


def _resolve_dtype(volume, dtype):
    if isinstance(volume, LabelVolume):
        if dtype not in (None, "u8"):
            raise ValueError("label volume requested as float container")
        return "u8"
    if dtype is None:
        return "f64"
    if dtype not in ("f32", "f64"):
        raise ValueError(f"unsupported scalar dtype {dtype!r}")
    return dtype


def _cast_for_write(volume, key):
    out = volume.data.ravel(order="F")
    if key == "u8":
        return out.astype("<u1", copy=False)
    return out.astype("<f4" if key == "f32" else "<f8")


def _write_ctnv(volume, path, key):
    header = struct.pack(
        "<4sI3I3f3fI",
        CTNV_MAGIC,
        CTNV_VERSION,
        *volume.dims,
        *volume.spacing,
        *volume.origin,
        _CTNV_TAG_FOR[key],
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_cast_for_write(volume, key).tobytes())


def _write_nifti(volume, path, key):
    dtype = _NIFTI_DTYPES[_NIFTI_CODE_FOR[key]]
    header = bytearray(NIFTI_VOX_OFFSET)
    struct.pack_into("<i", header, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *volume.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, _NIFTI_CODE_FOR[key], dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    header[123] = 2  # xyzt_units: millimeters
    struct.pack_into("<h", header, 252, 1)  # qform_code, identity rotation
    struct.pack_into("<3f", header, 268, *volume.origin)
    header[344:348] = b"n+1\0"
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(_cast_for_write(volume, key).tobytes())


def write_volume(volume, path, format=None, dtype=None):
    """Write a volume to ``path``.

    ``format`` is "ctnv" or "nifti"; when omitted it is inferred from the
    extension (".nii" selects NIfTI).  ``dtype`` may be "f32" or "f64" for
    scalar volumes (default "f64", bit-exact round trip); labels always use
    the uint8 container and requesting a float container raises ValueError.
    """
    path = os.fspath(path)
    if format is None:
        format = "nifti" if path.endswith(".nii") else "ctnv"
    if format not in ("ctnv", "nifti"):
        raise ValueError(f"unknown volume format {format!r}")
    key = _resolve_dtype(volume, dtype)
    if format == "ctnv":
        _write_ctnv(volume, path, key)
    else:
        _write_nifti(volume, path, key)
