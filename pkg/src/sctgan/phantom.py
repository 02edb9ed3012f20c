"""Procedural lower-arm phantoms: paired three-echo MR and CT volumes.

The arm runs along y. Two curved tubular bones (cortical shell around a
textured trabecular core) and a few tendon cords sit inside an elliptical
soft-tissue cross-section in the x-z plane. Cortical bone and tendons are
both MR signal voids, so only shape context separates them.

Tissue parameters are synthetic stand-ins chosen to reproduce the contrast
relationships of the imaging problem, not measured values.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .registration import RigidTransform
from .volume import HU_MAX, HU_MIN, Grid, Mask3D, Volume3D, resample_trilinear, save_volume

ECHO_TIMES_MS = (2.1, 3.25, 4.4)
CLASSES = ("air", "soft", "cortical", "trabecular", "tendon")


@dataclass(frozen=True)
class Tissue:
    rho: float
    t2star_ms: float
    hu: float


@dataclass(frozen=True)
class TissueModel:
    air: Tissue = Tissue(0.0, 1.0, -1000.0)
    soft: Tissue = Tissue(1.0, 30.0, 40.0)
    cortical: Tissue = Tissue(0.1, 0.4, 1200.0)
    trabecular: Tissue = Tissue(0.6, 15.0, 300.0)
    tendon: Tissue = Tissue(0.15, 0.8, 80.0)
    trabecular_hu_texture: float = 150.0
    # relative proton-density modulation of marrow by the same texture
    trabecular_rho_texture: float = 0.4

    def __post_init__(self):
        if self.cortical.t2star_ms > 1.0 or self.tendon.t2star_ms > 1.0:
            raise ValueError("cortical bone and tendon need T2* <= 1 ms")
        if self.air.rho != 0.0:
            raise ValueError("air must have zero proton density")
        if not self.cortical.hu > 200.0 > self.tendon.hu:
            raise ValueError("need cortical HU > 200 > tendon HU")

    def tissue(self, name) -> Tissue:
        return getattr(self, name)


class PhantomGeometryError(ValueError):
    pass


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_tendons: int | None = None  # None: drawn from 2..4
    mr_noise: float = 0.02  # fraction of the soft-tissue echo-1 signal
    ct_noise_hu: float = 20.0
    # bone geometry as fractions of the soft-tissue semi-axes
    bone_radius_frac: tuple[float, float] = (0.22, 0.30)
    cortical_mm: tuple[float, float] = (2.0, 3.0)
    tendon_radius_mm: tuple[float, float] = (1.2, 2.0)
    arm_frac: tuple[float, float] = (0.40, 0.44)  # semi-axis / half-extent, x-z plane

    @classmethod
    def from_dict(cls, d) -> "PhantomSpec":
        d = dict(d)
        for k in ("dims", "spacing", "bone_radius_frac", "cortical_mm", "tendon_radius_mm",
                  "arm_frac"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def grid(self) -> Grid:
        dims = np.asarray(self.dims)
        sp = np.asarray(self.spacing)
        # centred so rotations about the mm origin pivot on the volume centre
        return Grid(self.dims, self.spacing, tuple(-(dims - 1) / 2.0 * sp))


@dataclass
class Phantom:
    mr: list[Volume3D]
    ct: Volume3D
    labels: dict[str, Mask3D]
    layout: dict = field(default_factory=dict)


def _value_noise(rng, shape, cell):
    """Band-limited noise in [-1, 1]: cubic upsampling of a coarse random lattice."""
    coarse = [int(np.ceil(n / cell)) + 3 for n in shape]
    lattice = rng.uniform(-1.0, 1.0, size=coarse)
    zoom = [(n + 3 * cell) / c for n, c in zip(shape, coarse)]
    fine = ndimage.zoom(lattice, zoom, order=3)[: shape[0], : shape[1], : shape[2]]
    return np.clip(fine / max(np.abs(fine).max(), 1e-9), -1.0, 1.0)


def _tube_distance(X, Y, Z, axis_x, axis_z, y0, y1):
    """Distance to a y-directed polyline axis between y0 and y1 (capped ends)."""
    dx = X - axis_x[None, :, None]
    dz = Z - axis_z[None, :, None]
    radial = np.sqrt(dx * dx + dz * dz)
    beyond = np.maximum(np.maximum(y0 - Y, Y - y1), 0.0)
    return np.sqrt(radial ** 2 + beyond ** 2)


def generate_phantom(spec: PhantomSpec, tissues: TissueModel | None = None) -> Phantom:
    tissues = tissues or TissueModel()
    nx, ny, nz = spec.dims
    if ny % 8 or nz % 8:
        raise PhantomGeometryError(f"sagittal plane {ny}x{nz} must be divisible by 8")
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    C = grid.centers()
    X, Y, Z = C[..., 0], C[..., 1], C[..., 2]
    y_axis = C[0, :, 0, 1]
    half = (np.asarray(spec.dims) - 1) / 2.0 * np.asarray(spec.spacing)

    # soft-tissue ellipse, tapering slightly along the arm
    ax0 = half[0] * rng.uniform(*spec.arm_frac) * 2
    az0 = half[2] * rng.uniform(*spec.arm_frac) * 2
    taper = 1.0 - rng.uniform(0.0, 0.12) * (y_axis - y_axis[0]) / max(np.ptp(y_axis), 1e-9)
    ax_y, az_y = ax0 * taper, az0 * taper
    ellipse = (X / ax_y[None, :, None]) ** 2 + (Z / az_y[None, :, None]) ** 2
    soft = ellipse <= 1.0

    label = np.zeros(spec.dims, dtype=np.int8)  # index into CLASSES
    label[soft] = 1
    tex = _value_noise(rng, spec.dims, cell=max(1.0, 3.0 / min(spec.spacing)))

    # bones must stay inside the soft tissue with a 2-voxel margin
    allowed = ndimage.binary_erosion(soft, iterations=2)
    L = np.ptp(y_axis)
    bones = []
    sides = (-1.0, 1.0) if rng.uniform() < 0.5 else (1.0, -1.0)
    for b, side in enumerate(sides):
        for _ in range(50):
            r_out = min(ax0, az0) * rng.uniform(*spec.bone_radius_frac)
            thick = rng.uniform(*spec.cortical_mm)
            cx = side * ax0 * rng.uniform(0.38, 0.48)
            cz = az0 * rng.uniform(-0.12, 0.12)
            amp = rng.uniform(0.5, 2.0)
            phase = rng.uniform(0, 2 * np.pi)
            s = np.pi * (y_axis - y_axis[0]) / L + phase
            axis_x = cx + amp * np.sin(s)
            axis_z = cz + 0.5 * amp * np.cos(s)
            # ends inside the field of view, flared like an epiphysis
            y0 = y_axis[0] + L * rng.uniform(0.04, 0.2)
            y1 = y_axis[-1] - L * rng.uniform(0.04, 0.2)
            t = (y_axis - y0) / max(y1 - y0, 1e-9)
            flare = 1.0 + rng.uniform(0.2, 0.4) * (
                np.exp(-((t / 0.12) ** 2)) + np.exp(-(((1 - t) / 0.12) ** 2)))
            r_y = r_out * flare
            d = _tube_distance(X, Y, Z, axis_x, axis_z, y0, y1)
            rad = r_y[None, :, None]
            outer = d <= rad
            if np.all(allowed[outer]) and not np.any(label[outer] >= 2):
                break
        else:
            raise PhantomGeometryError(f"bone {b} does not fit inside the soft tissue "
                                       f"(seed {spec.seed})")
        inner = d <= np.maximum(rad - thick, 0.5 * min(spec.spacing))
        label[outer] = 2
        label[inner] = 3
        bones.append(dict(axis_x=axis_x, axis_z=axis_z, y0=y0, y1=y1, r=r_y, thick=thick))

    n_tendons = spec.n_tendons if spec.n_tendons is not None else int(rng.integers(2, 5))
    tendons = []
    for k in range(n_tendons):
        r = rng.uniform(*spec.tendon_radius_mm)
        for _ in range(200):
            if k == 0:
                # hugging a bone: a confounding signal void next to cortex
                bone = bones[int(rng.integers(len(bones)))]
                ang = rng.uniform(0, 2 * np.pi)
                dist = bone["r"] + r + 0.6 * min(spec.spacing)
                tx = bone["axis_x"] + dist * np.cos(ang)
                tz = bone["axis_z"] + dist * np.sin(ang)
            else:
                px = rng.uniform(-0.8, 0.8) * ax0
                pz = rng.uniform(-0.8, 0.8) * az0
                tx = np.full_like(y_axis, px) + 0.5 * np.sin(y_axis / 15.0 + k)
                tz = np.full_like(y_axis, pz)
            d = _tube_distance(X, Y, Z, tx, tz, y_axis[0] - 10, y_axis[-1] + 10)
            cord = d <= r
            ok_soft = np.all(label[cord] == 1)
            ok_inside = np.all(((tx / ax_y) ** 2 + (tz / az_y) ** 2) < (1 - 1.5 * r / min(ax0, az0)) ** 2)
            if cord.any() and ok_soft and ok_inside:
                label[cord] = 4
                tendons.append(dict(x=tx, z=tz, r=r, adjacent=k == 0))
                break
        else:
            raise PhantomGeometryError(f"could not place tendon {k} (seed {spec.seed})")

    # MR echoes
    rho = np.zeros(spec.dims)
    t2 = np.ones(spec.dims)
    hu = np.zeros(spec.dims)
    for ci, name in enumerate(CLASSES):
        sel = label == ci
        ts = tissues.tissue(name)
        rho[sel], t2[sel], hu[sel] = ts.rho, ts.t2star_ms, ts.hu
    trab = label == 3
    rho[trab] *= 1.0 - tissues.trabecular_rho_texture * tex[trab]
    hu[trab] += tissues.trabecular_hu_texture * tex[trab]

    soft_signal = tissues.soft.rho * np.exp(-ECHO_TIMES_MS[0] / tissues.soft.t2star_ms)
    mr = []
    for te in ECHO_TIMES_MS:
        clean = rho * np.exp(-te / t2)
        noisy = clean + rng.normal(0.0, spec.mr_noise * soft_signal, size=spec.dims)
        mr.append(Volume3D(noisy, grid.spacing, grid.origin, "MR"))
    ct_vals = np.clip(hu + rng.normal(0.0, spec.ct_noise_hu, size=spec.dims), HU_MIN, HU_MAX)
    ct = Volume3D(ct_vals, grid.spacing, grid.origin, "HU")
    labels = {name: Mask3D(label == ci, grid.spacing, grid.origin) for ci, name in enumerate(CLASSES)}
    return Phantom(mr, ct, labels, dict(bones=len(bones), tendons=len(tendons)))


def perturb_pose(ct: Volume3D, xf: RigidTransform) -> Volume3D:
    """Resample ``ct`` through ``xf`` on its own grid (a misaligned copy)."""
    return resample_trilinear(ct, xf, ct.grid)


def random_pose(rng, max_rot_deg=10.0, max_shift_vox=5.0, spacing=1.0) -> RigidTransform:
    """Rotation about a random axis plus a translation, both within the bounds."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0, max_rot_deg))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
    d = rng.normal(size=3)
    t = d / np.linalg.norm(d) * rng.uniform(0, max_shift_vox) * spacing
    return RigidTransform(R, t)


def write_subject(phantom: Phantom, out_dir, subject: str, ct: Volume3D | None = None) -> dict:
    """Write one subject's volumes; returns the manifest entry with relative paths."""
    out = Path(out_dir)
    files = {}
    for e, vol in enumerate(phantom.mr, 1):
        rel = f"{subject}/mr_e{e}"
        save_volume(vol, out / rel)
        files[f"mr_e{e}"] = rel + ".hdr"
    save_volume(ct if ct is not None else phantom.ct, out / f"{subject}/ct")
    files["ct"] = f"{subject}/ct.hdr"
    for name, m in phantom.labels.items():
        save_volume(m, out / f"{subject}/label_{name}")
        files[f"label_{name}"] = f"{subject}/label_{name}.hdr"
    return {"id": subject, "files": files}


def write_manifest(out_dir, entries, spec: PhantomSpec, count: int) -> Path:
    path = Path(out_dir) / "manifest.json"
    doc = {"spec": spec.to_dict(), "count": count, "subjects": entries}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
