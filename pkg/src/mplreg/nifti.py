"""Minimal NIfTI-1 single-file reader/writer.

Supports exactly the subset the pipeline needs: uncompressed ``.nii`` with
magic ``n+1``, datatype uint8 / int16 / float32, no extensions. Spacing and
origin are honoured; orientation matrices beyond that are ignored (the
pipeline operates on a common cropped grid). Files are written little-endian
with a float32 payload; big-endian files are byte-swapped on read.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError, UnsupportedDataError
from .grid import GridMeta
from .volume import LabelMask, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
_DTYPES = {2: "u1", 4: "i2", 16: "f4"}
_MAGIC_SINGLE = b"n+1\x00"


def read_nifti(path, as_label: bool = False) -> Volume | LabelMask:
    """Read a NIfTI-1 file into a Volume (or LabelMask when ``as_label``).

    scl_slope/scl_inter are applied when scl_slope is nonzero. Raises
    FormatError on bad magic, UnsupportedDataError on datatypes outside the
    supported subset, TruncatedFileError on short payloads.
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr == HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        end = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348; not a NIfTI-1 file")
    magic = raw[344:348]
    if magic != _MAGIC_SINGLE:
        raise FormatError(f"{path}: magic {magic!r} is not the single-file 'n+1'")

    dim = struct.unpack_from(end + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(end + "2h", raw, 70)
    pixdim = struct.unpack_from(end + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(end + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(end + "2h", raw, 252)
    qoffset = struct.unpack_from(end + "3f", raw, 268)
    srow_x = struct.unpack_from(end + "4f", raw, 280)
    srow_y = struct.unpack_from(end + "4f", raw, 296)
    srow_z = struct.unpack_from(end + "4f", raw, 312)

    if datatype not in _DTYPES:
        raise UnsupportedDataError(f"{path}: datatype code {datatype} not in supported subset")
    if not 1 <= dim[0] <= 7:
        raise FormatError(f"{path}: dim[0]={dim[0]} out of range")
    if dim[0] > 3 and any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise UnsupportedDataError(f"{path}: only 3-D volumes supported, dim={dim}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: non-positive dims {dims}")
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise FormatError(f"{path}: non-positive pixdim {spacing}")

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    nbytes = dims[0] * dims[1] * dims[2] * bitpix // 8
    if len(raw) < offset + nbytes:
        raise TruncatedFileError(
            f"{path}: payload needs {nbytes} bytes at offset {offset}, file has {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=end + _DTYPES[datatype], count=int(np.prod(dims)), offset=offset)
    data = arr.astype(np.float64).reshape(dims, order="F")
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = data * float(scl_slope) + float(scl_inter)

    if sform_code > 0:
        origin = (float(srow_x[3]), float(srow_y[3]), float(srow_z[3]))
    elif qform_code > 0:
        origin = tuple(float(q) for q in qoffset)
    else:
        origin = (0.0, 0.0, 0.0)

    grid = GridMeta(dims, spacing, origin)
    cls = LabelMask if as_label else Volume
    return cls(grid, data)


def write_nifti(v: Volume, path) -> None:
    """Write a volume as little-endian float32 single-file NIfTI-1."""
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, v.dims[0], v.dims[1], v.dims[2], 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # float32
    struct.pack_into(
        "<8f", hdr, 76, 1.0, v.spacing[0], v.spacing[1], v.spacing[2], 0.0, 0.0, 0.0, 0.0
    )
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<80s", hdr, 148, b"mplreg")
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<4f", hdr, 280, v.spacing[0], 0.0, 0.0, v.origin[0])
    struct.pack_into("<4f", hdr, 296, 0.0, v.spacing[1], 0.0, v.origin[1])
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, v.spacing[2], v.origin[2])
    hdr[344:348] = _MAGIC_SINGLE

    payload = np.asfortranarray(v.data.astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(payload.tobytes(order="F"))
