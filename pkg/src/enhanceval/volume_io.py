"""Volume grids, NIfTI-1 parsing/serialization, and grid preprocessing.

Grids come in three kinds sharing one geometry model:

* :class:`VoxelGrid` -- scalar intensities (MRI signal), float32.
* :class:`LabelGrid` -- per-voxel class map, uint8, values in {0, 1, 2, 3}
  (0 background, 1 normal brain, 2 non-enhancing abnormal, 3 enhancing).
* :class:`ProbGrid` -- per-voxel 4-channel class probabilities, float32,
  simplex-constrained per voxel.

``data`` is indexed ``data[i, j, k]`` (``[i, j, k, c]`` for probabilities)
where ``(i, j, k)`` is the voxel index along the three spatial axes; the
voxel-to-world map is ``world = affine @ (i, j, k, 1)``.  On disk the first
axis varies fastest (NIfTI convention); in memory arrays are C-contiguous.

Grids are immutable after construction (arrays are marked read-only) and all
operations here are pure functions, so grids are safe to share across threads.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateInputError,
    FormatError,
    LabelValueError,
    TruncationError,
    UnsupportedError,
    ValidationError,
)

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
SIMPLEX_TOL = 1e-4

# NIfTI-1 datatype codes we accept.
_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_DTYPE_CODES = {np.dtype(np.uint8): 2, np.dtype(np.float32): 16}
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64}

_HEADER_DTD = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype(_HEADER_DTD).newbyteorder(byteorder)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.flags.writeable = False
    return out


def _check_geometry(dims, spacing, affine):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValidationError(f"dims must be 3 positive integers, got {dims}")
    if len(spacing) != 3 or any(not (s > 0) for s in spacing):
        raise ValidationError(f"spacing must be 3 positive reals, got {spacing}")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValidationError(f"affine must be 4x4, got shape {affine.shape}")
    if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValidationError(f"affine last row must be (0,0,0,1), got {affine[3]}")
    return dims, spacing, affine


@dataclass
class VoxelGrid:
    """3D scalar volume with spacing (mm/voxel) and voxel-to-world affine."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims, self.spacing, self.affine = _check_geometry(
            self.dims, self.spacing, self.affine
        )
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != self.dims:
            raise ValidationError(
                f"data shape {data.shape} does not match dims {self.dims}"
            )
        if not np.isfinite(data).all():
            raise ValidationError("volume contains NaN or Inf values")
        self.data = _freeze(data)
        self.affine = _freeze(self.affine)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, self.affine.copy(), data)


@dataclass
class LabelGrid:
    """Per-voxel class map on the same geometry model as :class:`VoxelGrid`."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims, self.spacing, self.affine = _check_geometry(
            self.dims, self.spacing, self.affine
        )
        raw = np.asarray(self.data)
        if not np.issubdtype(raw.dtype, np.integer):
            if not np.isfinite(raw).all() or np.any(raw != np.round(raw)):
                raise LabelValueError("label map contains non-integer values")
        if raw.shape != self.dims:
            raise ValidationError(
                f"data shape {raw.shape} does not match dims {self.dims}"
            )
        bad = (raw < 0) | (raw > 3)
        if bad.any():
            offending = raw[bad].ravel()[0]
            raise LabelValueError(
                f"label value {offending} outside the class coding {{0,1,2,3}}"
            )
        self.data = _freeze(raw.astype(np.uint8))
        self.affine = _freeze(self.affine)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def intracranial_mask(self) -> np.ndarray:
        """Boolean mask of voxels inside the head (any label > 0)."""
        return self.data > 0

    def class_mask(self, cls: int) -> np.ndarray:
        return self.data == cls

    def with_data(self, data: np.ndarray) -> "LabelGrid":
        return LabelGrid(self.dims, self.spacing, self.affine.copy(), data)


@dataclass
class ProbGrid:
    """Per-voxel 4-channel class-probability field (simplex per voxel)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims, self.spacing, self.affine = _check_geometry(
            self.dims, self.spacing, self.affine
        )
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != self.dims + (4,):
            raise ValidationError(
                f"probability data shape {data.shape} must be {self.dims + (4,)}"
            )
        if not np.isfinite(data).all():
            raise ValidationError("probability volume contains NaN or Inf values")
        if data.min() < -SIMPLEX_TOL or data.max() > 1.0 + SIMPLEX_TOL:
            raise ValidationError(
                f"channel values outside [0,1]: min {data.min():.6g}, "
                f"max {data.max():.6g}"
            )
        sums = data.sum(axis=-1, dtype=np.float64)
        worst = float(np.abs(sums - 1.0).max())
        if worst > SIMPLEX_TOL:
            raise ValidationError(
                f"per-voxel channel sums deviate from 1 by up to {worst:.6g} "
                f"(tolerance {SIMPLEX_TOL})"
            )
        self.data = _freeze(np.clip(data, 0.0, 1.0))
        self.affine = _freeze(self.affine)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data: np.ndarray) -> "ProbGrid":
        return ProbGrid(self.dims, self.spacing, self.affine.copy(), data)


Grid = VoxelGrid | LabelGrid | ProbGrid


def same_geometry(a, b) -> bool:
    return (
        a.dims == b.dims
        and a.spacing == b.spacing
        and np.array_equal(a.affine, b.affine)
    )


def require_alignment(a, b, what: str = "grids") -> None:
    """Raise AlignmentError unless the two grids share dims, spacing and affine."""
    from .errors import AlignmentError

    if not same_geometry(a, b):
        raise AlignmentError(
            f"{what} are not on the same lattice: "
            f"dims {a.dims} vs {b.dims}, spacing {a.spacing} vs {b.spacing}, "
            f"affine\n{np.asarray(a.affine)}\nvs\n{np.asarray(b.affine)}"
        )


# ---------------------------------------------------------------------------
# NIfTI-1 parsing / serialization
# ---------------------------------------------------------------------------


def _detect_byteorder(raw: bytes) -> str:
    (sizeof_le,) = struct.unpack_from("<i", raw, 0)
    (sizeof_be,) = struct.unpack_from(">i", raw, 0)
    if sizeof_le == HEADER_SIZE:
        return "<"
    if sizeof_be == HEADER_SIZE:
        return ">"
    # Fall back to the dim[0] sanity check: the dimension count must be 1..7.
    (dim0_le,) = struct.unpack_from("<h", raw, 40)
    if 1 <= dim0_le <= 7:
        return "<"
    (dim0_be,) = struct.unpack_from(">h", raw, 40)
    if 1 <= dim0_be <= 7:
        return ">"
    raise FormatError(
        f"not a NIfTI-1 header: sizeof_hdr is {sizeof_le} (LE) / {sizeof_be} (BE)"
    )


def _affine_from_quaternion(hdr) -> np.ndarray:
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a_sq) if a_sq > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] == -1.0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _affine_from_header(hdr) -> np.ndarray:
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
        return affine
    if int(hdr["qform_code"]) > 0:
        return _affine_from_quaternion(hdr)
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    return np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])


def parse_nifti(raw: bytes, kind: str) -> Grid:
    """Parse a (possibly gzipped) single-file NIfTI-1 byte sequence.

    Parameters
    ----------
    raw : bytes
        File contents; gzip is detected by its two magic bytes.
    kind : {"intensity", "label", "probability"}
        Selects the returned grid type and its validation rules.
        Probability inputs must be 4D with exactly 4 channels.
    """
    if kind not in ("intensity", "label", "probability"):
        raise ValueError(f"unknown kind {kind!r}")
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < HEADER_SIZE:
        raise TruncationError(
            f"file is {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header"
        )
    order = _detect_byteorder(raw)
    hdr = np.frombuffer(raw, dtype=_header_dtype(order), count=1)[0]

    magic = bytes(hdr["magic"]).ljust(4, b"\x00")
    if magic != MAGIC_SINGLE:
        if magic.rstrip(b"\x00") == b"ni1":
            raise UnsupportedError("two-file (.hdr/.img) NIfTI-1 is not supported")
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC_SINGLE!r}")

    code = int(hdr["datatype"])
    if code not in _DTYPES:
        raise UnsupportedError(f"unsupported NIfTI datatype code {code}")
    dtype = np.dtype(_DTYPES[code]).newbyteorder(order)

    dim = np.asarray(hdr["dim"], dtype=np.int64)
    ndim = int(dim[0])
    if ndim < 3 or ndim > 4:
        raise UnsupportedError(f"expected a 3D or 4D volume, got dim[0]={ndim}")
    dims = tuple(int(d) for d in dim[1:4])
    nchan = int(dim[4]) if ndim == 4 else 1
    if kind == "probability":
        if nchan != 4:
            raise ValidationError(
                f"probability volumes must have 4 channels, got {nchan}"
            )
    elif nchan != 1:
        raise ValidationError(f"{kind} volumes must be 3D, got {nchan} channels")

    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(not (s > 0) for s in spacing):
        raise ValidationError(f"non-positive pixdim {spacing}")
    affine = _affine_from_header(hdr)

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise FormatError(f"vox_offset {offset} points inside the header")
    count = int(np.prod(dims)) * nchan
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncationError(
            f"data section truncated: need {nbytes} bytes at offset {offset}, "
            f"file has {len(raw) - offset}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    shape = dims + (nchan,) if nchan > 1 else dims
    data = flat.reshape(shape, order="F")

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0.0 and (slope, inter) != (1.0, 0.0):
        data = data.astype(np.float64) * slope + inter

    if kind == "label":
        return LabelGrid(dims, spacing, affine, data)
    if kind == "probability":
        return ProbGrid(dims, spacing, affine, data.astype(np.float32))
    return VoxelGrid(dims, spacing, affine, data.astype(np.float32))


def write_nifti(grid: Grid, gzip_output: bool = False) -> bytes:
    """Serialize a grid to single-file NIfTI-1 bytes (little-endian).

    Intensities and probabilities are stored as float32, labels as uint8;
    ``parse_nifti(write_nifti(g), kind)`` reproduces geometry and data exactly.
    """
    if isinstance(grid, LabelGrid):
        data = grid.data
        ndim, nchan = 3, 1
    elif isinstance(grid, ProbGrid):
        data = grid.data
        ndim, nchan = 4, 4
    elif isinstance(grid, VoxelGrid):
        data = grid.data
        ndim, nchan = 3, 1
    else:
        raise TypeError(f"not a grid: {type(grid)!r}")

    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = ndim
    dim[1:4] = grid.dims
    if ndim == 4:
        dim[4] = nchan
    hdr["dim"] = dim
    hdr["datatype"] = _DTYPE_CODES[data.dtype]
    hdr["bitpix"] = _BITPIX[_DTYPE_CODES[data.dtype]]
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = grid.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = HEADER_SIZE + 4
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["descrip"] = b"enhanceval"
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = grid.affine[0].astype(np.float32)
    hdr["srow_y"] = grid.affine[1].astype(np.float32)
    hdr["srow_z"] = grid.affine[2].astype(np.float32)
    hdr["magic"] = MAGIC_SINGLE

    body = data.ravel(order="F")  # first axis fastest on disk
    out = hdr.tobytes() + b"\x00\x00\x00\x00" + body.tobytes()
    if gzip_output:
        out = gzip.compress(out, mtime=0)
    return out


# ---------------------------------------------------------------------------
# Preprocessing: percentile clamping, isotropic resampling
# ---------------------------------------------------------------------------


def percentile_thresholds(
    grid: VoxelGrid, lo: float = 1.0, hi: float = 99.0, domain: str = "nonzero"
) -> tuple[float, float]:
    """Percentile cut values over the chosen domain.

    Percentiles interpolate linearly between order statistics at rank
    ``p * (n - 1) / 100``.  ``domain="nonzero"`` restricts to voxels != 0,
    which is what brain-extracted volumes need (the background would drag
    the low percentile to zero).
    """
    if not (0 <= lo < hi <= 100):
        raise ValidationError(f"need 0 <= lo < hi <= 100, got lo={lo}, hi={hi}")
    if domain not in ("nonzero", "all"):
        raise ValueError(f"unknown domain {domain!r}")
    values = grid.data.ravel()
    if domain == "nonzero":
        values = values[values != 0]
        if values.size == 0:
            raise DegenerateInputError(
                "all voxels are zero; no nonzero domain for percentile clamping"
            )
    plo, phi = np.percentile(values.astype(np.float64), [lo, hi])
    return float(plo), float(phi)


def clamp_to(grid: VoxelGrid, lo_value: float, hi_value: float) -> VoxelGrid:
    """Clamp intensities into ``[lo_value, hi_value]``.  Exactly idempotent."""
    return grid.with_data(np.clip(grid.data, lo_value, hi_value))


def percentile_clamp(
    grid: VoxelGrid, lo: float = 1.0, hi: float = 99.0, domain: str = "nonzero"
) -> VoxelGrid:
    """Clamp intensities at the lo-th and hi-th percentiles of the domain."""
    plo, phi = percentile_thresholds(grid, lo, hi, domain)
    return clamp_to(grid, plo, phi)


def resample_isotropic(grid: Grid, target_mm: float = 1.0, mode: str | None = None):
    """Resample any grid kind onto an isotropic lattice of ``target_mm`` spacing.

    Output dims are ``ceil(dims * spacing / target)``; voxel 0 keeps its world
    position and the affine is rescaled accordingly.  Intensities and
    probabilities interpolate trilinearly (probabilities are renormalized to
    the simplex afterwards); labels use nearest-neighbour, which is mandatory.
    Resampling to the current spacing returns the grid unchanged.
    """
    if not target_mm > 0:
        raise ValidationError(f"target spacing must be positive, got {target_mm}")
    is_label = isinstance(grid, LabelGrid)
    if mode is None:
        mode = "nearest" if is_label else "trilinear"
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown mode {mode!r}")
    if is_label and mode == "trilinear":
        raise ValidationError("trilinear interpolation is invalid for label grids")

    if all(s == target_mm for s in grid.spacing):
        return grid

    t = float(target_mm)
    scale = np.array([t / s for s in grid.spacing])
    new_dims = tuple(int(np.ceil(d * s / t)) for d, s in zip(grid.dims, grid.spacing))
    new_affine = grid.affine.copy()
    new_affine[:, :3] = new_affine[:, :3] * scale[np.newaxis, :]
    new_spacing = (t, t, t)

    grids_out = np.indices(new_dims, dtype=np.float64)
    coords = [grids_out[i] * scale[i] for i in range(3)]
    order = 0 if mode == "nearest" else 1

    if isinstance(grid, ProbGrid):
        channels = [
            ndimage.map_coordinates(
                grid.data[..., c].astype(np.float64), coords, order=order,
                mode="nearest",
            )
            for c in range(4)
        ]
        stacked = np.clip(np.stack(channels, axis=-1), 0.0, None)
        sums = stacked.sum(axis=-1, keepdims=True)
        sums[sums <= 0] = 1.0
        return ProbGrid(new_dims, new_spacing, new_affine, stacked / sums)

    resampled = ndimage.map_coordinates(
        grid.data.astype(np.float64), coords, order=order, mode="nearest"
    )
    if is_label:
        return LabelGrid(new_dims, new_spacing, new_affine, resampled.astype(np.uint8))
    return VoxelGrid(new_dims, new_spacing, new_affine, resampled)
