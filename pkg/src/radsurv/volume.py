"""Volumetric data model and preprocessing.

A :class:`VoxelGrid` is a 3D scalar field on a regular axis-aligned grid with
voxel spacing and world origin in millimetres.  Values are indexed ``[x, y, z]``
and serialized x-fastest (Fortran order).  :class:`Mask` and :class:`LabelMap`
share the geometry and hold boolean / small-integer voxels.

File formats
------------
* NIfTI-1 subset: single-file ``.nii``, 348-byte little-endian header, magic
  ``n+1\\0``, datatypes uint8 (2), int16 (4) and float32 (16), ``dim[0] == 3``.
  ``scl_slope``/``scl_inter`` are applied on read when the slope is nonzero.
  Compressed ``.nii.gz`` and any other datatype are rejected with
  :class:`~radsurv.errors.FormatError`.
* Raw-JSON fixture format: ``<name>.json`` metadata next to a little-endian
  float32 ``.raw`` payload; round-trips bit-exactly.

Geometry is axis-aligned throughout (no direction matrix): inputs are assumed
co-registered and resampled the way challenge-style head-and-neck data ships.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DataError, FormatError

__all__ = [
    "VoxelGrid",
    "Mask",
    "LabelMap",
    "BoundingBox",
    "read_volume",
    "write_volume",
    "read_raw_json",
    "write_raw_json",
    "resample",
    "union_bounding_box",
    "crop",
    "merge_labels",
    "CT_PAD",
    "PET_PAD",
]

#: Pad values used when a crop box extends past the grid: air for CT (HU),
#: zero activity for PET, background for masks.
CT_PAD = -1024.0
PET_PAD = 0.0

_Vec3 = tuple[float, float, float]


def _as_vec3(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.shape != (3,):
        raise ArgumentError(f"{name} must have exactly 3 components, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """3D scalar volume with spacing/origin metadata.

    Attributes
    ----------
    values : np.ndarray
        Shape ``(nx, ny, nz)`` float array, indexed ``values[x, y, z]``.
    spacing : np.ndarray
        Voxel edge lengths in mm, strictly positive.
    origin : np.ndarray
        World position (mm) of the centre of voxel ``(0, 0, 0)``.
    """

    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ArgumentError(f"values must be a 3D array, got ndim={values.ndim}")
        spacing = _as_vec3(self.spacing, "spacing")
        origin = _as_vec3(self.origin, "origin")
        if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
            raise ArgumentError(f"spacing must be positive and finite, got {spacing}")
        if not np.all(np.isfinite(origin)):
            raise ArgumentError(f"origin must be finite, got {origin}")
        if not np.all(np.isfinite(values)):
            raise DataError("volume contains non-finite voxel values")
        for field, arr in (("values", values), ("spacing", spacing), ("origin", origin)):
            arr.setflags(write=False)
            object.__setattr__(self, field, arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def extent(self) -> "BoundingBox":
        """World-space box spanned by the voxel cells (centre +/- spacing/2)."""
        lo = self.origin - self.spacing / 2.0
        hi = self.origin + (np.array(self.dims) - 1) * self.spacing + self.spacing / 2.0
        return BoundingBox(tuple(lo), tuple(hi))

    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        return float(np.prod(self.spacing))

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.spacing, other.spacing)
            and np.array_equal(self.origin, other.origin)
        )

    def equals(self, other: "VoxelGrid") -> bool:
        """Bit-exact equality of geometry and values."""
        return self.same_geometry(other) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary region of interest on the same grid layout as :class:`VoxelGrid`."""

    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ArgumentError(f"mask values must be a 3D array, got ndim={values.ndim}")
        values = values.astype(bool)
        spacing = _as_vec3(self.spacing, "spacing")
        origin = _as_vec3(self.origin, "origin")
        if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
            raise ArgumentError(f"spacing must be positive and finite, got {spacing}")
        for field, arr in (("values", values), ("spacing", spacing), ("origin", origin)):
            arr.setflags(write=False)
            object.__setattr__(self, field, arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.values))

    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def extent(self) -> "BoundingBox":
        lo = self.origin - self.spacing / 2.0
        hi = self.origin + (np.array(self.dims) - 1) * self.spacing + self.spacing / 2.0
        return BoundingBox(tuple(lo), tuple(hi))

    def same_geometry(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.spacing, other.spacing)
            and np.array_equal(self.origin, other.origin)
        )

    def equals(self, other: "Mask") -> bool:
        return self.same_geometry(other) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer annotation volume: 0 = background, 1 = primary tumour (GTVp),
    2 = nodal tumour (GTVn)."""

    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ArgumentError(f"label values must be a 3D array, got ndim={values.ndim}")
        values = np.rint(values).astype(np.uint8) if values.dtype.kind == "f" else values.astype(np.uint8)
        spacing = _as_vec3(self.spacing, "spacing")
        origin = _as_vec3(self.origin, "origin")
        if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
            raise ArgumentError(f"spacing must be positive and finite, got {spacing}")
        for field, arr in (("values", values), ("spacing", spacing), ("origin", origin)):
            arr.setflags(write=False)
            object.__setattr__(self, field, arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned world-space box, corners in mm."""

    min_corner: _Vec3
    max_corner: _Vec3

    def __post_init__(self):
        lo = _as_vec3(self.min_corner, "min_corner")
        hi = _as_vec3(self.max_corner, "max_corner")
        if np.any(lo > hi):
            raise ArgumentError(f"min_corner {lo} exceeds max_corner {hi}")
        object.__setattr__(self, "min_corner", tuple(float(v) for v in lo))
        object.__setattr__(self, "max_corner", tuple(float(v) for v in hi))

    def union(self, other: "BoundingBox") -> "BoundingBox":
        lo = np.minimum(self.min_corner, other.min_corner)
        hi = np.maximum(self.max_corner, other.max_corner)
        return BoundingBox(tuple(lo), tuple(hi))


# ---------------------------------------------------------------------------
# NIfTI-1 subset I/O
# ---------------------------------------------------------------------------

_NIFTI_HEADER_SIZE = 348
_NIFTI_MAGIC = b"n+1\x00"
_GZIP_MAGIC = b"\x1f\x8b"

_NIFTI_DTYPES = {
    2: np.dtype("<u1"),   # uint8
    4: np.dtype("<i2"),   # int16
    16: np.dtype("<f4"),  # float32
}
_NIFTI_CODES = {"u8": 2, "i16": 4, "f32": 16}

_HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert _HEADER_DTYPE.itemsize == _NIFTI_HEADER_SIZE


def read_volume(path) -> VoxelGrid:
    """Read a volume from disk, dispatching on extension.

    ``.nii`` is parsed as the NIfTI-1 subset; ``.json`` as the raw-JSON
    fixture format.

    Raises
    ------
    FormatError
        Unsupported magic bytes, datatype, dimensionality or extension.
    DataError
        Non-finite voxel values after scaling.
    IOError
        The file is shorter than the header plus voxel payload.
    """
    path = Path(path)
    if path.suffix == ".json":
        return read_raw_json(path)
    if path.name.endswith(".nii.gz"):
        raise FormatError(f"{path}: compressed .nii.gz is not supported; decompress to .nii first")
    if path.suffix != ".nii":
        raise FormatError(f"{path}: unsupported extension {path.suffix!r} (expected .nii or .json)")
    blob = path.read_bytes()
    if blob[:2] == _GZIP_MAGIC:
        raise FormatError(f"{path}: gzip-compressed payload is not supported; decompress to .nii first")
    if len(blob) < _NIFTI_HEADER_SIZE:
        raise IOError(f"{path}: truncated file ({len(blob)} bytes < {_NIFTI_HEADER_SIZE}-byte header)")
    header = np.frombuffer(blob[:_NIFTI_HEADER_SIZE], dtype=_HEADER_DTYPE)[0]
    # numpy strips trailing NULs from bytes fields, so compare the stripped form
    if bytes(header["magic"]) != _NIFTI_MAGIC.rstrip(b"\x00"):
        raise FormatError(f"{path}: bad magic {bytes(header['magic'])!r}, expected {_NIFTI_MAGIC!r}")
    if int(header["sizeof_hdr"]) != _NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: sizeof_hdr={int(header['sizeof_hdr'])}, expected 348")
    ndim = int(header["dim"][0])
    if ndim != 3:
        raise FormatError(f"{path}: dim[0]={ndim}, only 3D volumes are supported")
    code = int(header["datatype"])
    if code not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported datatype code {code} (supported: 2, 4, 16)")
    dtype = _NIFTI_DTYPES[code]
    nx, ny, nz = (int(d) for d in header["dim"][1:4])
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims {(nx, ny, nz)}")
    spacing = np.abs(np.asarray(header["pixdim"][1:4], dtype=np.float64))
    if np.any(spacing <= 0) or not np.all(np.isfinite(spacing)):
        raise FormatError(f"{path}: invalid pixdim {tuple(spacing)}")
    offset = int(header["vox_offset"])
    if offset < _NIFTI_HEADER_SIZE:
        offset = 352
    n_vox = nx * ny * nz
    payload = blob[offset : offset + n_vox * dtype.itemsize]
    if len(payload) < n_vox * dtype.itemsize:
        raise IOError(
            f"{path}: truncated voxel payload ({len(payload)} bytes, "
            f"expected {n_vox * dtype.itemsize})"
        )
    raw = np.frombuffer(payload, dtype=dtype)
    values = raw.astype(np.float64).reshape((nx, ny, nz), order="F")
    slope = float(header["scl_slope"])
    inter = float(header["scl_inter"])
    if slope != 0.0 and np.isfinite(slope):
        values = values * slope + (inter if np.isfinite(inter) else 0.0)
    if int(header["sform_code"]) > 0:
        origin = np.array(
            [header["srow_x"][3], header["srow_y"][3], header["srow_z"][3]], dtype=np.float64
        )
    else:
        origin = np.array(
            [header["qoffset_x"], header["qoffset_y"], header["qoffset_z"]], dtype=np.float64
        )
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite voxel values after scaling")
    return VoxelGrid(values=values, spacing=spacing, origin=origin)


def write_volume(grid: VoxelGrid | Mask | LabelMap, path, dtype: str = "f32") -> None:
    """Write a grid as a single-file NIfTI-1 volume.

    ``dtype`` is one of ``f32``, ``i16``, ``u8``; values are cast without
    scaling (``scl_slope`` is written as 1).
    """
    if dtype not in _NIFTI_CODES:
        raise ArgumentError(f"unsupported dtype {dtype!r} (use f32, i16 or u8)")
    path = Path(path)
    code = _NIFTI_CODES[dtype]
    np_dtype = _NIFTI_DTYPES[code]
    values = np.asarray(grid.values)
    if dtype != "f32" and values.dtype.kind == "f":
        values = np.rint(values)
    data = np.asarray(values, dtype=np_dtype, order="F")

    header = np.zeros((), dtype=_HEADER_DTYPE)
    header["sizeof_hdr"] = _NIFTI_HEADER_SIZE
    header["regular"] = b"r"
    header["dim"][0] = 3
    header["dim"][1:4] = grid.dims
    header["dim"][4:] = 1
    header["datatype"] = code
    header["bitpix"] = np_dtype.itemsize * 8
    header["pixdim"][0] = 1.0
    header["pixdim"][1:4] = np.asarray(grid.spacing, dtype=np.float32)
    header["vox_offset"] = 352.0
    header["scl_slope"] = 1.0
    header["scl_inter"] = 0.0
    header["xyzt_units"] = 2  # NIFTI_UNITS_MM
    header["sform_code"] = 1
    header["qform_code"] = 0
    origin = np.asarray(grid.origin, dtype=np.float64)
    spacing = np.asarray(grid.spacing, dtype=np.float64)
    header["srow_x"] = [spacing[0], 0.0, 0.0, origin[0]]
    header["srow_y"] = [0.0, spacing[1], 0.0, origin[1]]
    header["srow_z"] = [0.0, 0.0, spacing[2], origin[2]]
    header["qoffset_x"], header["qoffset_y"], header["qoffset_z"] = origin
    header["magic"] = _NIFTI_MAGIC

    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(b"\x00" * 4)  # extension flag: no extensions
        fh.write(data.tobytes(order="F"))


# ---------------------------------------------------------------------------
# Raw-JSON fixture format
# ---------------------------------------------------------------------------

def read_raw_json(path) -> VoxelGrid:
    """Read the raw-JSON fixture format (``<name>.json`` + ``<name>.raw``)."""
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON metadata: {exc}") from exc
    for key in ("dims", "spacing", "origin", "dtype", "data_file"):
        if key not in meta:
            raise FormatError(f"{path}: missing key {key!r}")
    if meta["dtype"] != "f32":
        raise FormatError(f"{path}: unsupported dtype {meta['dtype']!r} (only f32)")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"{path}: invalid dims {dims}")
    raw_path = path.parent / meta["data_file"]
    blob = raw_path.read_bytes()
    n_vox = dims[0] * dims[1] * dims[2]
    if len(blob) < n_vox * 4:
        raise IOError(f"{raw_path}: truncated payload ({len(blob)} bytes, expected {n_vox * 4})")
    raw = np.frombuffer(blob[: n_vox * 4], dtype="<f4")
    values = raw.astype(np.float64).reshape(dims, order="F")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{raw_path}: non-finite voxel values")
    return VoxelGrid(values=values, spacing=np.asarray(meta["spacing"], dtype=float),
                     origin=np.asarray(meta["origin"], dtype=float))


def write_raw_json(grid: VoxelGrid, path) -> None:
    """Write the raw-JSON fixture format; read/write round-trips bit-exactly
    for float32-representable data."""
    path = Path(path)
    raw_name = path.stem + ".raw"
    meta = {
        "dims": list(grid.dims),
        "spacing": [float(s) for s in grid.spacing],
        "origin": [float(o) for o in grid.origin],
        "dtype": "f32",
        "data_file": raw_name,
    }
    payload = np.asarray(grid.values, dtype="<f4").tobytes(order="F")
    (path.parent / raw_name).write_bytes(payload)
    path.write_text(json.dumps(meta, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Resampling / cropping / label handling
# ---------------------------------------------------------------------------

def resample(grid, target_spacing, mode: str):
    """Resample a grid to new isotropic (or per-axis) spacing.

    ``mode='spline'`` uses cubic B-spline interpolation with mirror boundary
    handling (intensity images); ``mode='nearest'`` picks the closest input
    voxel centre and is mandatory for :class:`Mask` and :class:`LabelMap`.

    Output dims are ``ceil(n * s / t)`` per axis so the original extent is
    always covered; the origin is preserved.
    """
    target = np.asarray(target_spacing, dtype=float)
    if target.ndim == 0:
        target = np.full(3, float(target))
    if target.shape != (3,) or np.any(target <= 0) or not np.all(np.isfinite(target)):
        raise ArgumentError(f"target_spacing must be 3 positive reals, got {target_spacing!r}")
    if mode not in ("spline", "nearest"):
        raise ArgumentError(f"mode must be 'spline' or 'nearest', got {mode!r}")
    is_intensity = isinstance(grid, VoxelGrid)
    if not is_intensity and mode != "nearest":
        raise ArgumentError("masks and label maps must be resampled with mode='nearest'")

    src = np.asarray(grid.values)
    spacing = np.asarray(grid.spacing, dtype=float)
    out_dims = np.ceil(np.array(grid.dims) * spacing / target).astype(int)
    out_dims = np.maximum(out_dims, 1)

    # Output voxel centre i*t maps to fractional input index i*t/s (shared origin).
    axes = [np.arange(n) * target[a] / spacing[a] for a, n in enumerate(out_dims)]
    coords = np.meshgrid(*axes, indexing="ij")

    if mode == "nearest":
        out = ndimage.map_coordinates(
            src.astype(np.uint8) if src.dtype == bool else src,
            coords, order=0, mode="nearest",
        )
    else:
        out = ndimage.map_coordinates(
            src.astype(np.float64), coords, order=3, mode="mirror", prefilter=True,
        )

    if isinstance(grid, Mask):
        return Mask(values=out.astype(bool), spacing=target, origin=grid.origin)
    if isinstance(grid, LabelMap):
        return LabelMap(values=out, spacing=target, origin=grid.origin)
    return VoxelGrid(values=out, spacing=target, origin=grid.origin)


def union_bounding_box(a, b) -> BoundingBox:
    """Smallest axis-aligned world box covering the full extents of both grids."""
    return a.extent().union(b.extent())


def crop(grid, box: BoundingBox, pad: float = 0.0):
    """Restrict a grid to the voxels whose centres fall inside ``box``.

    Membership uses half-open bounds ``min <= centre < max``.  Box regions
    outside the source grid are filled with ``pad`` (use :data:`CT_PAD` for CT
    volumes); the origin is updated to the first retained voxel centre.
    """
    spacing = np.asarray(grid.spacing, dtype=float)
    origin = np.asarray(grid.origin, dtype=float)
    lo = np.asarray(box.min_corner, dtype=float)
    hi = np.asarray(box.max_corner, dtype=float)
    i_lo = np.ceil((lo - origin) / spacing).astype(int)
    i_hi = (np.ceil((hi - origin) / spacing) - 1).astype(int)
    dims = np.asarray(grid.dims)
    if np.any(i_hi < 0) or np.any(i_lo > dims - 1) or np.any(i_hi < i_lo):
        raise ArgumentError(f"crop box {box} does not overlap grid extent {grid.extent()}")

    out_dims = i_hi - i_lo + 1
    src = np.asarray(grid.values)
    is_mask = isinstance(grid, Mask)
    if is_mask:
        out = np.zeros(out_dims, dtype=bool)
    elif isinstance(grid, LabelMap):
        out = np.zeros(out_dims, dtype=np.uint8)
    else:
        out = np.full(out_dims, float(pad), dtype=np.float64)

    src_lo = np.maximum(i_lo, 0)
    src_hi = np.minimum(i_hi, dims - 1)
    dst_lo = src_lo - i_lo
    dst_hi = src_hi - i_lo
    out[dst_lo[0] : dst_hi[0] + 1, dst_lo[1] : dst_hi[1] + 1, dst_lo[2] : dst_hi[2] + 1] = src[
        src_lo[0] : src_hi[0] + 1, src_lo[1] : src_hi[1] + 1, src_lo[2] : src_hi[2] + 1
    ]
    new_origin = origin + i_lo * spacing
    if is_mask:
        return Mask(values=out, spacing=spacing, origin=new_origin)
    if isinstance(grid, LabelMap):
        return LabelMap(values=out, spacing=spacing, origin=new_origin)
    return VoxelGrid(values=out, spacing=spacing, origin=new_origin)


def merge_labels(lm: LabelMap) -> Mask:
    """Merge primary (1) and nodal (2) tumour labels into one binary mask."""
    values = np.asarray(lm.values)
    bad = np.setdiff1d(np.unique(values), [0, 1, 2])
    if bad.size:
        raise DataError(f"label map contains unsupported labels {bad.tolist()} (allowed: 0, 1, 2)")
    return Mask(values=(values == 1) | (values == 2), spacing=lm.spacing, origin=lm.origin)


def as_label_map(grid: VoxelGrid) -> LabelMap:
    """Reinterpret a loaded intensity grid as a label map (values rounded)."""
    return LabelMap(values=np.asarray(grid.values), spacing=grid.spacing, origin=grid.origin)


def with_values(grid: VoxelGrid, values: np.ndarray) -> VoxelGrid:
    """Same geometry, new values."""
    return replace(grid, values=values)
