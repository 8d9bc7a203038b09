"""Minimal NIfTI-1 single-file (``.nii`` / ``.nii.gz``) reader and writer.

Only what the pipeline needs: 3D scalar images, voxel spacing, and an origin
taken from the qform offsets (falling back to the sform translation). Voxels
are used in stored order; no reorientation is applied.
"""

from __future__ import annotations

import gzip
import io
import os
import struct
from pathlib import Path

import numpy as np

from .volume import LabelVolume, Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (little-endian base)
DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
CODES = {np.dtype(v): k for k, v in DTYPES.items()}


class NiftiError(ValueError):
    pass


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("sizeof_hdr is not 348; not a NIfTI-1 file")
    if raw[344:347] not in (b"n+1", b"ni1"):
        raise NiftiError(f"bad magic {raw[344:348]!r}")
    if raw[344:347] == b"ni1":
        raise NiftiError("two-file (.hdr/.img) NIfTI is not supported")

    def unpack(fmt, offset):
        return struct.unpack_from(endian + fmt, raw, offset)

    dim = unpack("8h", 40)
    hdr = {
        "endian": endian,
        "dim": dim,
        "datatype": unpack("h", 70)[0],
        "bitpix": unpack("h", 72)[0],
        "pixdim": unpack("8f", 76),
        "vox_offset": unpack("f", 108)[0],
        "scl_slope": unpack("f", 112)[0],
        "scl_inter": unpack("f", 116)[0],
        "qform_code": unpack("h", 252)[0],
        "sform_code": unpack("h", 254)[0],
        "qoffset": unpack("3f", 268),
        "srow_x": unpack("4f", 280),
        "srow_y": unpack("4f", 296),
        "srow_z": unpack("4f", 312),
    }
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"invalid dim[0]={ndim}")
    extra = [d for d in dim[4 : ndim + 1]]
    if ndim < 3 or any(d != 1 for d in extra):
        raise NiftiError(f"expected a 3D image, got dim={dim[: ndim + 1]}")
    if min(dim[1:4]) < 1:
        raise NiftiError(f"non-positive dimensions {dim[1:4]}")
    if hdr["datatype"] not in DTYPES:
        raise NiftiError(f"unsupported datatype code {hdr['datatype']}")
    return hdr


def _f32(value: float) -> float:
    # shortest decimal that round-trips through float32, so 0.8 reads back as 0.8
    return float(str(np.float32(value)))


def load_volume(path: str | os.PathLike, kind: str = "auto") -> Volume3D:
    """Read a NIfTI-1 file.

    Args:
        path: ``.nii`` or ``.nii.gz`` file.
        kind: ``"image"``, ``"label"`` or ``"auto"``. Auto returns a
            :class:`LabelVolume` for unscaled uint8 data, otherwise an image.

    Raises:
        FileNotFoundError: missing file.
        NiftiError: malformed header or non-3D content.
    """
    path = Path(path)
    raw = _read_bytes(path)
    hdr = read_header(raw)
    nx, ny, nz = hdr["dim"][1:4]
    dtype = np.dtype(DTYPES[hdr["datatype"]]).newbyteorder(hdr["endian"])
    offset = int(hdr["vox_offset"]) or VOX_OFFSET
    count = nx * ny * nz
    if len(raw) < offset + count * dtype.itemsize:
        raise NiftiError(f"truncated data: need {count} voxels of {dtype}")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape((nx, ny, nz), order="F").astype(dtype.newbyteorder("="))

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    scaled = slope not in (0.0, 1.0) or inter != 0.0
    if scaled:
        data = data.astype(np.float32) * np.float32(slope or 1.0) + np.float32(inter)

    spacing = tuple(abs(_f32(p)) or 1.0 for p in hdr["pixdim"][1:4])
    if hdr["qform_code"] > 0:
        origin = tuple(_f32(o) for o in hdr["qoffset"])
    elif hdr["sform_code"] > 0:
        origin = tuple(_f32(r[3]) for r in (hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]))
    else:
        origin = (0.0, 0.0, 0.0)

    if kind == "auto":
        kind = "label" if data.dtype == np.uint8 and not scaled else "image"
    if kind == "label":
        return LabelVolume(data, spacing, origin)
    if kind != "image":
        raise ValueError(f"unknown kind {kind!r}")
    return Volume3D(data, spacing, origin)


def _header_bytes(shape, dtype: np.dtype, spacing, origin) -> bytes:
    buf = bytearray(VOX_OFFSET)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<h", buf, 70, CODES[dtype])
    struct.pack_into("<h", buf, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", buf, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", buf, 108, float(VOX_OFFSET))
    struct.pack_into("<f", buf, 112, 1.0)
    buf[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", buf, 252, 1, 1)
    struct.pack_into("<3f", buf, 268, *origin)
    sx, sy, sz = spacing
    ox, oy, oz = origin
    struct.pack_into("<4f", buf, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", buf, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", buf, 312, 0.0, 0.0, sz, oz)
    buf[344:348] = b"n+1\x00"
    return bytes(buf)


def save_volume(v: Volume3D, path: str | os.PathLike) -> None:
    """Write ``v`` as NIfTI-1: labels as uint8, images as float32.

    Gzip output is written with a zero timestamp and no embedded filename so
    identical volumes give identical bytes.
    """
    path = Path(path)
    if isinstance(v, LabelVolume):
        if v.data.size and v.data.max() > 255:
            raise ValueError("label values above 255 cannot be stored as uint8")
        data = v.data.astype(np.uint8)
    else:
        data = v.data.astype(np.float32)
    payload = _header_bytes(v.dims, data.dtype, v.spacing, v.origin)
    payload += data.astype(data.dtype.newbyteorder("<")).tobytes(order="F")
    if path.name.endswith(".gz"):
        out = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=out, mtime=0) as gz:
            gz.write(payload)
        payload = out.getvalue()
    with open(path, "wb") as f:
        f.write(payload)
