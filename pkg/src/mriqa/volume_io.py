"""NIfTI-1 reading/writing and synthetic ellipsoid phantoms.

Only the single-file variant (``.nii`` / ``.nii.gz``, magic ``n+1\\0``) is
supported. Written files are little-endian float32 with ``vox_offset`` 352.
Volume metadata travels in a JSON comment extension (ecode 6) when present.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
ECODE_COMMENT = 6

# NIfTI datatype code -> numpy dtype (byte order applied at read time)
DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}
DTYPE_CODES = {dt: code for code, dt in DATATYPES.items()}


class NiftiError(Exception):
    """Base class for NIfTI parsing failures."""


class BadMagic(NiftiError):
    pass


class UnsupportedVariant(BadMagic):
    """Detached header (``ni1``) or NIfTI-2 input."""


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class IoError(NiftiError, OSError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """3D intensity grid with geometry and acquisition metadata.

    ``data`` has shape ``(nx, ny, nz)``; axial slices are ``data[:, :, k]``.
    The array is stored as float32 and marked read-only.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with all dims >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 strictly positive values, got {self.spacing}")
        affine = np.diag([*spacing, 1.0]) if self.affine is None else np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        data.flags.writeable = False
        affine.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry and metadata, new intensities."""
        return Volume(data, self.spacing, self.affine, self.metadata)


# --------------------------------------------------------------------------
# reading
# --------------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _quaternion_affine(q: tuple[float, float, float], offset, pixdim) -> np.ndarray:
    b, c, d = q
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    out = np.eye(4)
    out[:3, :3] = rot * zooms
    out[:3, 3] = offset
    return out


def _parse_extensions(raw: bytes, endian: str, vox_offset: int) -> dict[str, str]:
    if len(raw) < HEADER_SIZE + 4 or raw[HEADER_SIZE] == 0:
        return {}
    meta: dict[str, str] = {}
    pos = HEADER_SIZE + 4
    while pos + 8 <= vox_offset:
        esize, ecode = struct.unpack(endian + "ii", raw[pos:pos + 8])
        if esize < 8 or pos + esize > vox_offset:
            break
        if ecode == ECODE_COMMENT:
            text = raw[pos + 8:pos + esize].rstrip(b"\x00").decode("utf-8", errors="replace")
            try:
                payload = json.loads(text)
            except json.JSONDecodeError:
                payload = None
            if isinstance(payload, dict):
                meta.update({str(k): str(v) for k, v in payload.items()})
        pos += esize
    return meta


def read_nifti(path: str | Path) -> Volume:
    """Load a single-file NIfTI-1 volume.

    Integer payloads are promoted to floating point with ``scl_slope`` and
    ``scl_inter`` applied (slope 0 means unscaled, per the format).
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"{path}: header is {len(raw)} bytes, need {HEADER_SIZE}")

    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(endian + "i", raw[:4])
        if sizeof_hdr == HEADER_SIZE:
            break
    else:
        if struct.unpack("<i", raw[:4])[0] == 540 or struct.unpack(">i", raw[:4])[0] == 540:
            raise UnsupportedVariant(f"{path}: NIfTI-2 is not supported")
        raise BadMagic(f"{path}: sizeof_hdr is not 348")

    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise UnsupportedVariant(f"{path}: detached .hdr/.img pairs are not supported")
    if magic != MAGIC_SINGLE:
        raise BadMagic(f"{path}: magic {magic!r} != {MAGIC_SINGLE!r}")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, _bitpix = struct.unpack(endian + "2h", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", raw[108:120])
    qform_code, sform_code = struct.unpack(endian + "2h", raw[252:256])
    quatern = struct.unpack(endian + "3f", raw[256:268])
    qoffset = struct.unpack(endian + "3f", raw[268:280])
    srows = struct.unpack(endian + "12f", raw[280:328])

    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    shape = [max(int(d), 1) for d in dim[1:4]]
    if ndim > 3 and any(d > 1 for d in dim[4:ndim + 1]):
        raise NiftiError(f"{path}: only 3D volumes are supported, got dim={dim[:ndim + 1]}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")

    dtype = DATATYPES[datatype].newbyteorder(endian)
    offset = int(vox_offset)
    count = shape[0] * shape[1] * shape[2]
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedData(f"{path}: payload has {max(len(raw) - offset, 0)} bytes, header promises {nbytes}")

    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    values = values.reshape(shape, order="F").astype(np.float64)
    if scl_slope != 0 and np.isfinite(scl_slope):
        values = values * scl_slope + scl_inter

    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        affine = np.eye(4)
        affine[:3, :] = np.array(srows, dtype=np.float64).reshape(3, 4)
    elif qform_code > 0:
        affine = _quaternion_affine(quatern, qoffset, pixdim)
    else:
        affine = np.diag([*spacing, 1.0])

    meta = _parse_extensions(raw, endian, offset)
    return Volume(values.astype(np.float32), spacing, affine, meta)


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------

def build_header(shape, spacing, affine, datatype: int = 16, vox_offset: int = VOX_OFFSET,
                 scl_slope: float = 1.0, scl_inter: float = 0.0, descrip: str = "") -> bytes:
    """Pack a little-endian 348-byte NIfTI-1 header."""
    dtype = DATATYPES[datatype]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *[int(s) for s in shape], 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *[float(s) for s in spacing], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(vox_offset), scl_slope, scl_inter)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    desc = descrip.encode("ascii", errors="replace")[:79]
    hdr[148:148 + len(desc)] = desc
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<12f", hdr, 280, *np.asarray(affine, dtype=np.float64)[:3, :].ravel())
    hdr[344:348] = MAGIC_SINGLE
    return bytes(hdr)


def _extension_block(metadata: Mapping[str, str]) -> bytes:
    text = json.dumps(dict(metadata), sort_keys=True).encode("utf-8")
    esize = 8 + len(text)
    esize += (-esize) % 16
    return struct.pack("<ii", esize, ECODE_COMMENT) + text.ljust(esize - 8, b"\x00")


def write_nifti(v: Volume, path: str | Path) -> None:
    """Write *v* as float32 NIfTI-1; gzip when the name ends in ``.gz``.

    gzip output uses a zero mtime so identical volumes give identical bytes.
    """
    path = Path(path)
    ext = _extension_block(v.metadata) if v.metadata else b""
    vox_offset = VOX_OFFSET + len(ext)
    header = build_header(v.dims, v.spacing, v.affine, vox_offset=vox_offset)
    flag = b"\x01\x00\x00\x00" if ext else b"\x00\x00\x00\x00"
    payload = np.asarray(v.data, dtype="<f4").tobytes(order="F")
    blob = header + flag + ext + payload
    try:
        if path.name.endswith(".gz"):
            with open(path, "wb") as fh:
                with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                    gz.write(blob)
        else:
            with open(path, "wb") as fh:
                fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# phantoms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    tissue_intensity: float = 100.0
    semi_axes: tuple[float, float, float] = (20.0, 24.0, 18.0)
    background_noise_sigma: float = 5.0
    seed: int = 0
    inner_intensity: float | None = None
    inner_semi_axes: tuple[float, float, float] | None = None

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if self.tissue_intensity <= 0:
            raise ValueError("tissue_intensity must be > 0")
        if self.background_noise_sigma < 0:
            raise ValueError("background_noise_sigma must be >= 0")
        for a, d in zip(self.semi_axes, self.dims):
            if a <= 0 or 2 * a > d:
                raise ValueError(f"semi-axes {self.semi_axes} do not fit inside dims {self.dims}")
        if (self.inner_intensity is None) != (self.inner_semi_axes is None):
            raise ValueError("inner_intensity and inner_semi_axes go together")
        if self.inner_semi_axes is not None:
            if any(i <= 0 or i > o for i, o in zip(self.inner_semi_axes, self.semi_axes)):
                raise ValueError("inner ellipsoid must lie inside the outer one")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    mask: np.ndarray
    inner_mask: np.ndarray | None
    mu_F: float
    sigma_B: float


def ellipsoid_mask(dims, semi_axes) -> np.ndarray:
    """Voxels whose centers satisfy sum(((i - c) / a)^2) <= 1, c = (n - 1) / 2."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    r2 = np.zeros(tuple(dims))
    for g, n, a in zip(grids, dims, semi_axes):
        r2 += ((g - (n - 1) / 2.0) / a) ** 2
    return r2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, GroundTruth]:
    mask = ellipsoid_mask(spec.dims, spec.semi_axes)
    data = np.zeros(spec.dims, dtype=np.float64)
    data[mask] = spec.tissue_intensity
    inner = None
    if spec.inner_semi_axes is not None:
        inner = ellipsoid_mask(spec.dims, spec.inner_semi_axes) & mask
        data[inner] = spec.inner_intensity
    if spec.background_noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        noise = rng.normal(0.0, spec.background_noise_sigma, size=spec.dims)
        data[~mask] = noise[~mask]
    vol = Volume(data.astype(np.float32), metadata={"source": "phantom", "seed": str(spec.seed)})
    mu_f = float(np.mean(data[mask], dtype=np.float64))
    mask.flags.writeable = False
    return vol, GroundTruth(mask, inner, mu_f, float(spec.background_noise_sigma))
