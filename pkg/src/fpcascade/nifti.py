"""Single-file NIfTI-1 (.nii) reader and writer.

Only uncompressed files with scalar voxel types are handled: uint8,
int16, float32 and float64.  Orientation (qform/sform) is written as
"unknown" and ignored on read; volumes stay in stored voxel order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InconsistentHeader,
    IoFailure,
    NonPositiveSpacing,
    TruncatedData,
    UnsupportedDatatype,
    WrongSize,
)
from .volume import Modality, Volume3D

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# code -> (numpy base type, bitpix)
DATATYPES = {
    2: (np.uint8, 8),
    4: (np.int16, 16),
    16: (np.float32, 32),
    64: (np.float64, 64),
}
CODE_FOR_DTYPE = {np.dtype(t).name: code for code, (t, _) in DATATYPES.items()}

# Field layout of the 348-byte header, in order.
_FIELDS = (
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p", "3f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern", "6f"),
    ("srow", "12f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
)
_FORMAT = "".join(fmt for _, fmt in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


@dataclass(frozen=True)
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype_code: int
    bitpix: int
    pixdim: tuple[float, ...]
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes
    byteorder: str = "<"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(DATATYPES[self.datatype_code][0]).newbyteorder(self.byteorder)

    @property
    def swapped(self) -> bool:
        """True when the file byte order differs from little-endian."""
        return self.byteorder == ">"


def _unpack(block: bytes, byteorder: str) -> dict:
    values = struct.unpack(byteorder + _FORMAT, block)
    out, pos = {}, 0
    for name, fmt in _FIELDS:
        count = int(fmt[:-1]) if fmt[:-1] and fmt[-1] != "s" else 1
        out[name] = values[pos] if count == 1 else tuple(values[pos:pos + count])
        pos += count
    return out


def parse_header(block: bytes) -> NiftiHeader:
    """Decode and validate a 348-byte NIfTI-1 header."""
    if len(block) != HEADER_SIZE:
        raise WrongSize(f"header must be {HEADER_SIZE} bytes, got {len(block)}")
    if struct.unpack("<i", block[:4])[0] == HEADER_SIZE:
        byteorder = "<"
    elif struct.unpack(">i", block[:4])[0] == HEADER_SIZE:
        byteorder = ">"
    else:
        raise WrongSize(f"sizeof_hdr is not {HEADER_SIZE} in either byte order")
    f = _unpack(block, byteorder)

    if f["magic"] != MAGIC_SINGLE:
        raise BadMagic(f"unsupported magic {f['magic']!r}; only single-file n+1 is read")
    code = f["datatype"]
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not supported")
    if f["bitpix"] != DATATYPES[code][1]:
        raise InconsistentHeader(f"bitpix {f['bitpix']} does not match datatype code {code}")
    dim = tuple(f["dim"])
    if not 1 <= dim[0] <= 7:
        raise InconsistentHeader(f"dim[0] must be in 1..7, got {dim[0]}")
    if any(n < 1 for n in dim[1:dim[0] + 1]):
        raise InconsistentHeader(f"non-positive extent in dim {dim}")
    pixdim = tuple(float(p) for p in f["pixdim"])
    if any(not p > 0 for p in pixdim[1:min(dim[0], 3) + 1]):
        raise NonPositiveSpacing(f"spatial pixdim must be positive, got {pixdim[1:4]}")

    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=dim,
        datatype_code=code,
        bitpix=f["bitpix"],
        pixdim=pixdim,
        scl_slope=float(f["scl_slope"]),
        scl_inter=float(f["scl_inter"]),
        vox_offset=float(f["vox_offset"]),
        magic=f["magic"],
        byteorder=byteorder,
    )


def decode_volume(data: bytes, modality: Modality | str = Modality.PET_SUV) -> Volume3D:
    """Decode an in-memory .nii byte string."""
    if len(data) < HEADER_SIZE:
        raise TruncatedData(f"file holds {len(data)} bytes, shorter than a header")
    hdr = parse_header(data[:HEADER_SIZE])
    ndim = hdr.dim[0]
    if ndim == 3 or (ndim == 4 and hdr.dim[4] == 1):
        shape = tuple(hdr.dim[1:4])
    else:
        raise InconsistentHeader(f"expected a 3D volume, got dim {hdr.dim[:ndim + 1]}")

    offset = int(hdr.vox_offset)
    count = shape[0] * shape[1] * shape[2]
    nbytes = count * hdr.dtype.itemsize
    if offset < HEADER_SIZE or offset + nbytes > len(data):
        raise TruncatedData(
            f"need {nbytes} voxel bytes at offset {offset}, file has {len(data)} bytes"
        )
    raw = np.frombuffer(data, dtype=hdr.dtype, count=count, offset=offset)
    vox = raw.astype(np.float64).reshape(shape, order="F")
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        if (hdr.scl_slope, hdr.scl_inter) != (1.0, 0.0):
            vox = vox * hdr.scl_slope + hdr.scl_inter
    return Volume3D(vox, hdr.pixdim[1:4], Modality(modality))


def read_volume(path, modality: Modality | str = Modality.PET_SUV) -> Volume3D:
    """Read a .nii file.  MASK/PROB modalities are validated on load."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_volume(data, modality)


def _pick_dtype(v: Volume3D) -> np.dtype:
    if v.modality is Modality.MASK:
        return np.dtype(np.uint8)
    as32 = v.voxels.astype(np.float32)
    if np.array_equal(as32.astype(np.float64), v.voxels):
        return np.dtype(np.float32)
    return np.dtype(np.float64)


def encode_volume(v: Volume3D, dtype=None, byteorder: str = "<") -> bytes:
    """Serialise a volume to .nii bytes.

    Without ``dtype`` masks are stored as uint8 and other volumes as float32
    when that is lossless, else float64.  Integer dtypes require integral
    in-range voxels; nothing is silently rounded.
    """
    if byteorder not in "<>":
        raise ValueError(f"byteorder must be '<' or '>', got {byteorder!r}")
    dt = _pick_dtype(v) if dtype is None else np.dtype(dtype)
    if dt.name not in CODE_FOR_DTYPE:
        raise UnsupportedDatatype(f"cannot store voxels as {dt}")
    code = CODE_FOR_DTYPE[dt.name]
    stored = v.voxels.astype(dt)
    if not np.array_equal(stored.astype(np.float64), v.voxels):
        raise ValueError(f"voxels are not exactly representable as {dt.name}")

    nx, ny, nz = v.extents
    fields = {
        "sizeof_hdr": HEADER_SIZE,
        "data_type": b"",
        "db_name": b"",
        "extents": 0,
        "session_error": 0,
        "regular": b"r",
        "dim_info": 0,
        "dim": (3, nx, ny, nz, 1, 1, 1, 1),
        "intent_p": (0.0, 0.0, 0.0),
        "intent_code": 0,
        "datatype": code,
        "bitpix": DATATYPES[code][1],
        "slice_start": 0,
        "pixdim": (1.0, *v.spacing_mm, 1.0, 1.0, 1.0, 1.0),
        "vox_offset": float(DEFAULT_VOX_OFFSET),
        "scl_slope": 1.0,
        "scl_inter": 0.0,
        "slice_end": 0,
        "slice_code": 0,
        "xyzt_units": 2,  # millimetres
        "cal_max": 0.0,
        "cal_min": 0.0,
        "slice_duration": 0.0,
        "toffset": 0.0,
        "glmax": 0,
        "glmin": 0,
        "descrip": v.modality.value.encode("ascii"),
        "aux_file": b"",
        "qform_code": 0,
        "sform_code": 0,
        "quatern": (0.0,) * 6,
        "srow": (0.0,) * 12,
        "intent_name": b"",
        "magic": MAGIC_SINGLE,
    }
    values = []
    for name, fmt in _FIELDS:
        val = fields[name]
        values.extend(val if isinstance(val, tuple) else (val,))
    header = struct.pack(byteorder + _FORMAT, *values)
    extension = b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE)
    body = stored.astype(dt.newbyteorder(byteorder)).tobytes(order="F")
    return header + extension + body


def write_volume(v: Volume3D, path, dtype=None, byteorder: str = "<") -> None:
    data = encode_volume(v, dtype=dtype, byteorder=byteorder)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
