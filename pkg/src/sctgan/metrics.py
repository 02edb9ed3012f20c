"""Synthetic-CT evaluation: MAE, Dice, isosurfaces, surface distances, reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import TRI_TABLE
from .registration import nearest_correspondences
from .volume import Mask3D, Volume3D, require_same_grid, threshold_mask

BONE_HU = 200.0
TISSUE_HU = -200.0
ERROR_WINDOW_HU = (-500.0, 500.0)


class EmptyRegionError(ValueError):
    pass


class EmptyMeshError(ValueError):
    pass


def mae(a: Volume3D, b: Volume3D, region: Mask3D) -> float:
    require_same_grid(a, b, region)
    m = region.values
    if not m.any():
        raise EmptyRegionError("MAE region is empty")
    diff = np.abs(a.values[m].astype(np.float64) - b.values[m].astype(np.float64))
    return float(diff.mean())


def dice(a: Mask3D, b: Mask3D) -> float:
    """2|a∩b| / (|a|+|b|); two empty masks agree perfectly (1.0)."""
    require_same_grid(a, b)
    na, nb = int(a.values.sum()), int(b.values.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a.values, b.values).sum())
    return 2.0 * inter / (na + nb)


def error_map(a: Volume3D, b: Volume3D) -> Volume3D:
    """Signed difference ``a - b``; negative where ``a`` is darker."""
    require_same_grid(a, b)
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    return Volume3D(diff, a.spacing, a.origin, "HU")


def error_map_to_pgm(emap: Volume3D, out_dir, window=ERROR_WINDOW_HU, axis: int = 0) -> list[Path]:
    """One binary 8-bit PGM per slice along ``axis``; window mapped linearly to 0..255."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = window
    scaled = np.clip((emap.values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    img = np.rint(scaled * 255).astype(np.uint8)
    paths = []
    for i in range(img.shape[axis]):
        sl = np.take(img, i, axis=axis)
        # rows = second remaining axis, columns = first
        sl = sl.T[::-1]
        p = out / f"slice_{i:04d}.pgm"
        p.write_bytes(f"P5\n{sl.shape[1]} {sl.shape[0]}\n255\n".encode() + sl.tobytes())
        paths.append(p)
    return paths


# -- marching cubes ----------------------------------------------------------

@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) mm
    triangles: np.ndarray  # (F, 3) int

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())


# corner offsets (i, j, k) and edge endpoints, classic table numbering
_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
])
_EDGES = np.array([
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
])
_TRI = np.full((256, 16), -1, dtype=np.int64)
for _i, _row in enumerate(TRI_TABLE):
    _TRI[_i, :len(_row)] = _row
_NTRI = np.array([len(r) // 3 for r in TRI_TABLE])


def marching_cubes(vol: Volume3D, iso: float) -> TriMesh:
    """Isosurface at ``iso`` with shared vertices; coordinates in mm.

    Corners with value below ``iso`` are "outside". Vertices sit on grid
    edges at the linear iso-crossing, so neighbouring cells reuse them.
    """
    v = vol.values.astype(np.float64)
    if min(v.shape) < 2:
        raise ValueError("marching cubes needs at least 2 samples per axis")
    nx, ny, nz = v.shape
    below = v < iso
    cube = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (di, dj, dk) in enumerate(_CORNERS):
        cube |= below[di:nx - 1 + di, dj:ny - 1 + dj, dk:nz - 1 + dk].astype(np.int64) << c
    cells = np.argwhere((cube != 0) & (cube != 255))
    if len(cells) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    codes = cube[cells[:, 0], cells[:, 1], cells[:, 2]]

    # expand to one row per emitted triangle corner
    ntri = _NTRI[codes]
    cell_rep = np.repeat(np.arange(len(cells)), ntri * 3)
    slot = np.concatenate([np.arange(n * 3) for n in ntri]) if len(ntri) else np.zeros(0, int)
    local_edge = _TRI[codes[cell_rep], slot]

    # global id of a grid edge: (lower endpoint linear index) * 3 + axis
    a = _CORNERS[_EDGES[local_edge, 0]]
    b = _CORNERS[_EDGES[local_edge, 1]]
    lo = np.minimum(a, b) + cells[cell_rep]
    axis = np.argmax(np.abs(b - a), axis=1)
    gid = ((lo[:, 0] * ny + lo[:, 1]) * nz + lo[:, 2]) * 3 + axis
    uniq, inverse = np.unique(gid, return_inverse=True)

    # interpolate one vertex per unique edge
    axis_u = uniq % 3
    lin = uniq // 3
    p0 = np.stack(np.unravel_index(lin, (nx, ny, nz)), axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), axis_u] += 1
    f0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    f1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    denom = f1 - f0
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    mu = np.where(np.abs(denom) > 1e-12, (iso - f0) / safe, 0.5)
    ijk = p0 + mu[:, None] * (p1 - p0)
    # crossings exactly on a grid point coincide across several edges
    ijk, merged = np.unique(ijk, axis=0, return_inverse=True)
    verts = vol.grid.index_to_mm(ijk)

    tris = merged.reshape(-1)[inverse].reshape(-1, 3)
    mesh = TriMesh(verts, tris)
    keep = mesh.triangle_areas() > 1e-12
    tris = tris[keep]
    # drop vertices no longer referenced
    used = np.unique(tris)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(verts[used], remap[tris])


def surface_distance(src: TriMesh, dst: TriMesh) -> tuple[np.ndarray, float]:
    """Per-vertex distance from ``src`` vertices to the closest ``dst`` vertex."""
    if src.is_empty() or dst.is_empty():
        raise EmptyMeshError("surface distance needs two non-empty meshes")
    _, _, d = nearest_correspondences(src.vertices, dst.vertices, cKDTree(dst.vertices), k=1)
    return d, float(d.mean())


# -- per-subject rows and reports ---------------------------------------------

@dataclass
class MetricsRow:
    subject: str
    mae_overall_hu: float
    mae_bone_hu: float
    dice_bone: float
    msd_sct_to_ct_mm: float
    msd_ct_to_sct_mm: float

    def __post_init__(self):
        self.subject = str(self.subject)
        for f in fields(self)[1:]:
            val = float(getattr(self, f.name))
            if not (val >= 0 or math.isnan(val)):
                raise ValueError(f"{f.name} must be non-negative, got {val}")
            setattr(self, f.name, val)
        if self.dice_bone > 1.0:
            raise ValueError(f"dice_bone must be <= 1, got {self.dice_bone}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MetricsRow":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


COLUMNS = [f.name for f in fields(MetricsRow)]
_PRECISION = {"mae_overall_hu": 1, "mae_bone_hu": 1, "dice_bone": 2,
              "msd_sct_to_ct_mm": 2, "msd_ct_to_sct_mm": 2}


def evaluate_subject(ct: Volume3D, sct: Volume3D, subject="0", bone_hu: float = BONE_HU,
                     tissue_hu: float = TISSUE_HU) -> MetricsRow:
    """All five per-subject metrics; masks come from the real CT."""
    require_same_grid(ct, sct)
    tissue = threshold_mask(ct, tissue_hu)
    bone_ct = threshold_mask(ct, bone_hu)
    bone_sct = threshold_mask(sct, bone_hu)
    mesh_ct = marching_cubes(ct, bone_hu)
    mesh_sct = marching_cubes(sct, bone_hu)
    if mesh_ct.is_empty() or mesh_sct.is_empty():
        msd_a = msd_b = float("nan")
    else:
        _, msd_a = surface_distance(mesh_sct, mesh_ct)
        _, msd_b = surface_distance(mesh_ct, mesh_sct)
    return MetricsRow(
        subject=subject,
        mae_overall_hu=mae(sct, ct, tissue),
        mae_bone_hu=mae(sct, ct, bone_ct) if bone_ct.values.any() else float("nan"),
        dice_bone=dice(bone_sct, bone_ct),
        msd_sct_to_ct_mm=msd_a,
        msd_ct_to_sct_mm=msd_b,
    )


def aggregate_report(rows: list[MetricsRow]) -> MetricsRow:
    """Unweighted column means over subjects."""
    if not rows:
        raise ValueError("cannot aggregate an empty list of rows")
    means = {c: float(np.mean([getattr(r, c) for r in rows])) for c in COLUMNS[1:]}
    return MetricsRow(subject="mean", **means)


def format_value(column: str, value: float) -> str:
    return f"{value:.{_PRECISION[column]}f}"


def report_csv(rows: list[MetricsRow], mean: MetricsRow | None = None) -> str:
    mean = mean or aggregate_report(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in [*rows, mean]:
        w.writerow([r.subject] + [format_value(c, getattr(r, c)) for c in COLUMNS[1:]])
    return buf.getvalue()


def report_json(rows: list[MetricsRow], mean: MetricsRow | None = None) -> str:
    mean = mean or aggregate_report(rows)
    doc = {"rows": [r.to_dict() for r in rows], "mean": mean.to_dict()}
    return json.dumps(doc, indent=2) + "\n"


def write_report(rows: list[MetricsRow], csv_path) -> MetricsRow:
    """Write ``csv_path`` and its JSON mirror (same stem, .json)."""
    mean = aggregate_report(rows)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(report_csv(rows, mean))
    csv_path.with_suffix(".json").write_text(report_json(rows, mean))
    return mean
