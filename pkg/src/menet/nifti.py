"""Minimal NIfTI-1 reader and writer.

Covers what BraTS-style volumes need: the 348-byte header, the five
common datatypes, gzip containers, slope/intercept scaling and
endianness detection via sizeof_hdr. Orientation fields (qform/sform
region) are carried through as opaque bytes, never interpreted; all
geometry in this toolkit is index-space plus the pixdim spacing.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimensionOverflow,
    IoFailure,
    TruncatedFile,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
DATA_OFFSET = 352  # header + 4 extension-flag bytes

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}

# byte span of the qform/sform fields kept as an opaque blob
_ORIENT_SLICE = slice(252, 328)


@dataclass
class Volume:
    """A 3-D scalar grid with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: bytes | None = None

    @property
    def extent(self) -> tuple[int, int, int]:
        return self.data.shape


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
        if raw[:2] == b"\x1f\x8b":
            return gzip.decompress(raw)
        return raw
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except (EOFError, gzip.BadGzipFile) as e:
        raise TruncatedFile(f"corrupt gzip container {path}: {e}") from e


def read_nifti(path) -> Volume:
    """Read a .nii / .nii.gz (or ni1 header+img pair) into a Volume.

    Values are rescaled by scl_slope/scl_inter when scl_slope is
    nonzero and not the identity; rescaled data comes back float64,
    otherwise the on-disk dtype is kept.
    """
    path = Path(path)
    buf = _read_bytes(path)
    if len(buf) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: {len(buf)} bytes is shorter than the header")
    header = buf[:HEADER_SIZE]

    (sizeof_le,) = struct.unpack_from("<i", header, 0)
    if sizeof_le == HEADER_SIZE:
        bo = "<"
    else:
        (sizeof_be,) = struct.unpack_from(">i", header, 0)
        if sizeof_be != HEADER_SIZE:
            raise BadMagic(f"{path}: sizeof_hdr is {sizeof_le}, not 348 in either byte order")
        bo = ">"

    magic = header[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", header, 40)
    if dim[0] not in (3, 4):
        raise DimensionOverflow(f"{path}: dim[0]={dim[0]}, need 3 or 4")
    if dim[0] == 4 and dim[4] > 1:
        raise DimensionOverflow(f"{path}: {dim[4]} frames unsupported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise DimensionOverflow(f"{path}: non-positive extent in dim {dim[1:4]}")

    (datatype,) = struct.unpack_from(bo + "h", header, 70)
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")
    dt = _DTYPES[datatype].newbyteorder(bo)

    pixdim = struct.unpack_from(bo + "8f", header, 76)
    (vox_offset,) = struct.unpack_from(bo + "f", header, 108)
    slope, inter = struct.unpack_from(bo + "2f", header, 112)

    if magic == b"n+1\x00":
        payload = buf
        offset = int(vox_offset)
        if offset < HEADER_SIZE:
            offset = DATA_OFFSET
    else:
        img = path.with_suffix(".img") if path.suffix != ".gz" else Path(
            str(path)[: -len("".join(path.suffixes))] + ".img")
        payload = _read_bytes(img)
        offset = int(vox_offset)

    nvox = nx * ny * nz
    need = nvox * dt.itemsize
    if len(payload) - offset < need:
        raise TruncatedFile(
            f"{path}: need {need} data bytes at offset {offset}, have {len(payload) - offset}"
        )
    arr = np.frombuffer(payload, dtype=dt, count=nvox, offset=offset)
    arr = arr.astype(dt.newbyteorder("=")).reshape((nx, ny, nz), order="F")

    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        arr = arr.astype(np.float64) * slope + inter

    spacing = tuple(float(abs(p)) if p != 0.0 else 1.0 for p in pixdim[1:4])
    return Volume(arr, spacing, orientation=header[_ORIENT_SLICE])


def write_nifti(volume: Volume, path, dtype=np.float32) -> None:
    """Write a Volume as single-file NIfTI-1 (gzipped when path ends in .gz).

    float32 payloads round-trip bit-exactly through read_nifti.
    """
    path = Path(path)
    dt = np.dtype(dtype)
    if dt not in _DTYPE_CODES:
        raise UnsupportedDatatype(f"cannot write dtype {dt}")
    data = np.asarray(volume.data)
    if data.ndim != 3 or min(data.shape) < 1:
        raise IoFailure(f"volume must be 3-D with positive extents, got {data.shape}")

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _DTYPE_CODES[dt])
    struct.pack_into("<h", header, 72, dt.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(DATA_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    if volume.orientation is not None:
        header[_ORIENT_SLICE] = volume.orientation
    header[344:348] = b"n+1\x00"

    payload = data.astype(dt.newbyteorder("<")).tobytes(order="F")
    blob = bytes(header) + b"\x00\x00\x00\x00" + payload
    try:
        if path.suffix == ".gz":
            # fixed mtime so identical volumes produce identical files
            blob = gzip.compress(blob, mtime=0)
        path.write_bytes(blob)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
