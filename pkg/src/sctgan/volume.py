"""Voxel volumes: data model, detached-header I/O, masking, resampling and
point-cloud extraction."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

if TYPE_CHECKING:
    from .registration import RigidTransform

HU_MIN = -1024.0
HU_MAX = 3071.0
AIR_HU = -1000.0
UNITS = ("HU", "MR", "mask")


class VolumeFormatError(ValueError):
    """Raised for unreadable or inconsistent volume files."""

    def __init__(self, path, field_name, message):
        super().__init__(f"{path}: {field_name}: {message}")
        self.path = str(path)
        self.field = field_name


class GridMismatchError(ValueError):
    pass


class EmptyOverlapError(ValueError):
    pass


class EmptyCloudError(ValueError):
    """No voxel satisfied the point-cloud selection rule."""


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValueError(f"origin must have three components, got {self.origin}")

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def centers(self) -> np.ndarray:
        """All voxel centers in mm, shape (nx, ny, nz, 3)."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def index_to_mm(self, ijk) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(ijk, dtype=float) * np.asarray(self.spacing)

    def mm_to_index(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)


def _check_values(values, grid_dims):
    if values.shape != tuple(grid_dims):
        raise ValueError(f"values shape {values.shape} does not match dims {grid_dims}")


@dataclass
class Volume3D:
    """Scalar grid indexed ``values[i, j, k]``; voxel center = origin + (i, j, k) * spacing."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    unit: str = "HU"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {self.values.shape}")
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}, got {self.unit!r}")
        g = Grid(self.values.shape, self.spacing, self.origin)
        self.spacing, self.origin = g.spacing, g.origin

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def grid(self) -> Grid:
        return Grid(self.values.shape, self.spacing, self.origin)

    @classmethod
    def on_grid(cls, grid: Grid, values, unit="HU") -> "Volume3D":
        return cls(np.asarray(values).reshape(grid.dims), grid.spacing, grid.origin, unit)


@dataclass
class Mask3D:
    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)
        g = Grid(self.values.shape, self.spacing, self.origin)
        self.spacing, self.origin = g.spacing, g.origin

    @property
    def dims(self):
        return self.values.shape

    @property
    def grid(self) -> Grid:
        return Grid(self.values.shape, self.spacing, self.origin)

    def count(self) -> int:
        return int(self.values.sum())


def require_same_grid(*items) -> Grid:
    grids = [it.grid for it in items]
    for g in grids[1:]:
        if g.dims != grids[0].dims or not (
            np.allclose(g.spacing, grids[0].spacing, rtol=0, atol=1e-9)
            and np.allclose(g.origin, grids[0].origin, rtol=0, atol=1e-6)
        ):
            raise GridMismatchError(f"grid mismatch: {grids[0]} vs {g}")
    return grids[0]


# -- file format -------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".hdr", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".hdr"), p.with_name(p.name + ".raw")


def save_volume(vol: Volume3D | Mask3D, path) -> Path:
    """Write ``<path>.hdr`` + ``<path>.raw``; returns the header path."""
    hdr, raw = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    unit = "mask" if isinstance(vol, Mask3D) else vol.unit
    nx, ny, nz = vol.dims
    lines = [
        f"dims: {nx} {ny} {nz}",
        "spacing: " + " ".join(repr(float(s)) for s in vol.spacing),
        "origin: " + " ".join(repr(float(o)) for o in vol.origin),
        f"unit: {unit}",
        "encoding: float32-le",
    ]
    hdr.write_text("\n".join(lines) + "\n", encoding="utf-8")
    body = np.asarray(vol.values, dtype="<f4").ravel(order="F")
    raw.write_bytes(body.tobytes())
    return hdr


def _parse_floats(path, key, text, count, cast=float):
    parts = text.split()
    if len(parts) != count:
        raise VolumeFormatError(path, key, f"expected {count} values, got {len(parts)}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise VolumeFormatError(path, key, str(exc)) from None


def load_volume(path) -> Volume3D | Mask3D:
    hdr, raw = _paths(path)
    if not hdr.exists():
        raise FileNotFoundError(f"missing header file {hdr}")
    if not raw.exists():
        raise FileNotFoundError(f"missing data file {raw}")
    fields = {}
    for lineno, line in enumerate(hdr.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise VolumeFormatError(hdr, f"line {lineno}", "expected 'key: value'")
        key, val = line.split(":", 1)
        fields[key.strip()] = val.strip()
    for key in ("dims", "spacing", "origin", "unit", "encoding"):
        if key not in fields:
            raise VolumeFormatError(hdr, key, "missing")
    dims = _parse_floats(hdr, "dims", fields["dims"], 3, int)
    spacing = _parse_floats(hdr, "spacing", fields["spacing"], 3)
    origin = _parse_floats(hdr, "origin", fields["origin"], 3)
    unit = fields["unit"]
    if unit not in UNITS:
        raise VolumeFormatError(hdr, "unit", f"unknown unit {unit!r}")
    if fields["encoding"] != "float32-le":
        raise VolumeFormatError(hdr, "encoding", f"unsupported encoding {fields['encoding']!r}")
    if min(dims) < 1:
        raise VolumeFormatError(hdr, "dims", f"non-positive dims {dims}")
    if min(spacing) <= 0:
        raise VolumeFormatError(hdr, "spacing", f"non-positive spacing {spacing}")
    data = raw.read_bytes()
    expected = int(np.prod(dims))
    if len(data) % 4 or len(data) // 4 != expected:
        raise VolumeFormatError(
            raw, "values", f"value count {len(data) / 4:g} does not match dims {dims} ({expected})"
        )
    values = np.frombuffer(data, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    if unit == "mask":
        return Mask3D(values != 0, spacing, origin)
    if unit == "HU":
        values = np.clip(values, HU_MIN, HU_MAX)
    return Volume3D(values, spacing, origin, unit)


# -- operations ---------------------------------------------------------------

def threshold_mask(vol: Volume3D, t: float) -> Mask3D:
    return Mask3D(vol.values > t, vol.spacing, vol.origin)


def sample_trilinear(vol: Volume3D, points_mm, fill: float = AIR_HU) -> np.ndarray:
    """Trilinear samples at arbitrary mm points; points outside the grid get ``fill``."""
    pts = np.asarray(points_mm, dtype=np.float64)
    shape = pts.shape[:-1]
    idx = vol.grid.mm_to_index(pts.reshape(-1, 3))
    dims = np.asarray(vol.dims)
    eps = 1e-9
    inside = np.all((idx >= -eps) & (idx <= dims - 1 + eps), axis=1)
    idx = np.clip(idx, 0, dims - 1)
    i0 = np.clip(np.floor(idx).astype(np.int64), 0, np.maximum(dims - 2, 0))
    frac = idx - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    v = vol.values.astype(np.float64)
    out = np.zeros(len(idx))
    for cx in (0, 1):
        wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                out += wx * wy * wz * v[ix, iy, iz]
    out[~inside] = fill
    return out.reshape(shape)


def resample_trilinear(vol: Volume3D, xf: "RigidTransform", target: Grid,
                       fill: float = AIR_HU) -> Volume3D:
    """Pull-resample: each target center ``p`` takes the source value at ``xf(p)``."""
    centers = target.centers().reshape(-1, 3)
    src_pts = xf.apply(centers)
    values = sample_trilinear(vol, src_pts, fill=fill)
    return Volume3D(values.reshape(target.dims), target.spacing, target.origin, vol.unit)


def tissue_support(mr: Volume3D, frac: float = 0.10, dilate: int = 2) -> np.ndarray:
    """Body interior: largest bright component, holes filled in 3D and in every
    axis-aligned section, then dilated."""
    p99 = np.percentile(mr.values, 99)
    bright = mr.values > frac * p99
    labels, n = ndimage.label(bright)
    if n == 0:
        return np.zeros(mr.dims, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    body = labels == int(np.argmax(sizes))
    filled = ndimage.binary_fill_holes(body)
    # cavities that reach the volume border are only closed within 2D sections
    for axis in range(3):
        for i in range(body.shape[axis]):
            sl = (slice(None),) * axis + (i,)
            filled[sl] |= ndimage.binary_fill_holes(body[sl])
    body = filled
    if dilate:
        body = ndimage.binary_dilation(body, iterations=dilate)
    return body


def extract_point_cloud(vol: Volume3D, mode: str, *, bone_hu: float = 200.0,
                        low_frac: float = 0.10) -> np.ndarray:
    """Voxel-center cloud (N, 3) in mm.

    ``high-CT``: voxels above ``bone_hu``. ``low-MR``: voxels darker than
    ``low_frac`` of the 99th-percentile intensity inside the tissue support.
    Raises EmptyCloudError when nothing is selected.
    """
    if mode == "high-CT":
        sel = vol.values > bone_hu
    elif mode == "low-MR":
        p99 = np.percentile(vol.values, 99)
        sel = (vol.values < low_frac * p99) & tissue_support(vol, low_frac)
    else:
        raise ValueError(f"unknown point-cloud mode {mode!r}")
    ijk = np.argwhere(sel)
    if len(ijk) == 0:
        raise EmptyCloudError(f"{mode} selection is empty")
    return vol.grid.index_to_mm(ijk)


def crop_to_overlap(a: Volume3D, b: Volume3D) -> tuple[Volume3D, Volume3D]:
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-9):
        raise GridMismatchError(f"spacing differs: {a.spacing} vs {b.spacing}")
    sp = np.asarray(a.spacing)
    offset = (np.asarray(b.origin) - np.asarray(a.origin)) / sp
    shift = np.round(offset).astype(int)
    if not np.allclose(offset, shift, atol=1e-6):
        raise GridMismatchError("grids are not voxel-aligned")
    # overlap in a's index space
    lo = np.maximum(0, shift)
    hi = np.minimum(np.asarray(a.dims), shift + np.asarray(b.dims))
    if np.any(hi <= lo):
        raise EmptyOverlapError("volumes do not overlap")
    sa = tuple(slice(l, h) for l, h in zip(lo, hi))
    sb = tuple(slice(l - s, h - s) for l, h, s in zip(lo, hi, shift))
    origin = tuple(np.asarray(a.origin) + lo * sp)
    return (
        Volume3D(a.values[sa], a.spacing, origin, a.unit),
        Volume3D(b.values[sb], b.spacing, origin, b.unit),
    )
