"""Minimal NIfTI-1 single-file reader/writer.

Covers the subset this pipeline needs: 3D scalar volumes, little-endian,
optional gzip compression (``.nii`` / ``.nii.gz``), affine stored in the
sform rows, voxel spacing in ``pixdim``. Data round-trips bitwise for the
supported dtypes.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import MissingFileError

HEADER_SIZE = 348
VOX_OFFSET = 352.0
MAGIC = b"n+1\x00"

# NIfTI datatype code <-> numpy dtype
_DTYPE_CODES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    1024: np.dtype(np.int64),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _write_bytes(path: Path, payload: bytes):
    # mtime=0 keeps compressed output byte-stable across runs
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


def read_nifti(path):
    """Read a 3D NIfTI-1 volume.

    Returns
    -------
    (data, affine, spacing) : ndarray, (4, 4) float array, (3,) float array
        ``data`` keeps the on-disk dtype; ``affine`` is the voxel-to-world
        map (sform if present, else a spacing diagonal); ``spacing`` is the
        per-axis voxel size in mm.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"volume file not found: {path}")
    with _open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: truncated NIfTI header")
    if struct.unpack_from("<i", raw, 0)[0] != HEADER_SIZE:
        raise ValueError(f"{path}: not a little-endian NIfTI-1 file")
    if raw[344:348] != MAGIC:
        raise ValueError(f"{path}: unsupported magic {raw[344:348]!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim != 3:
        raise ValueError(f"{path}: expected a 3D volume, got {ndim}D")
    shape = tuple(dim[1:4])

    datatype = struct.unpack_from("<h", raw, 70)[0]
    if datatype not in _DTYPE_CODES:
        raise ValueError(f"{path}: unsupported datatype code {datatype}")
    dtype = _DTYPE_CODES[datatype]

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = np.asarray(pixdim[1:4], dtype=np.float64)

    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    sform_code = struct.unpack_from("<h", raw, 254)[0]
    if sform_code > 0:
        rows = struct.unpack_from("<12f", raw, 280)
        affine = np.eye(4, dtype=np.float64)
        affine[0, :] = rows[0:4]
        affine[1, :] = rows[4:8]
        affine[2, :] = rows[8:12]
    else:
        affine = np.diag(np.concatenate([spacing, [1.0]]))

    n = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=vox_offset)
    data = data.reshape(shape, order="F").copy()
    return data, affine, spacing


def write_nifti(path, data, affine=None, spacing=None):
    """Write a 3D array as a NIfTI-1 file; gzip when path ends in .gz."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    dtype = data.dtype
    if dtype not in _CODE_FOR_DTYPE:
        raise ValueError(f"unsupported dtype {dtype}")
    if spacing is None:
        spacing = (1.0, 1.0, 1.0)
    spacing = np.asarray(spacing, dtype=np.float64)
    if affine is None:
        affine = np.diag(np.concatenate([spacing, [1.0]]))
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _CODE_FOR_DTYPE[dtype])
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, VOX_OFFSET)
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    header[123] = 2  # xyzt_units: mm
    struct.pack_into("<h", header, 252, 0)  # qform_code
    struct.pack_into("<h", header, 254, 1)  # sform_code: scanner
    struct.pack_into("<12f", header, 280, *affine[0], *affine[1], *affine[2])
    header[344:348] = MAGIC

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = bytes(header) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    _write_bytes(path, payload)
