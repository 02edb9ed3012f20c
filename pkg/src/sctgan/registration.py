"""Rigid CT-to-MR registration with point-to-point ICP."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class DegenerateFitError(ValueError):
    """Point configuration does not determine a rigid transform."""


@dataclass(frozen=True)
class RigidTransform:
    """``p -> R @ p + t`` in mm; maps CT coordinates into MR coordinates."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_euler(cls, angles_deg, t=(0.0, 0.0, 0.0), center=None) -> "RigidTransform":
        """Rotation Rz @ Ry @ Rx, optionally about ``center`` instead of the origin."""
        ax, ay, az = np.radians(angles_deg)
        cx, sx = np.cos(ax), np.sin(ax)
        cy, sy = np.cos(ay), np.sin(ay)
        cz, sz = np.cos(az), np.sin(az)
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        R = Rz @ Ry @ Rx
        t = np.asarray(t, dtype=float)
        if center is not None:
            c = np.asarray(center, dtype=float)
            t = t + c - R @ c
        return cls(R, t)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def rotation_angle_deg(self) -> float:
        c = np.clip((np.trace(self.R) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d) -> "RigidTransform":
        return cls(np.asarray(d["R"], dtype=float), np.asarray(d["t"], dtype=float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RigidTransform":
        return cls.from_dict(json.loads(Path(path).read_text()))


def apply_rigid(xf: RigidTransform, p) -> np.ndarray:
    return xf.apply(p)


@dataclass
class IcpResult:
    transform: RigidTransform
    rms_residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def _as_points(p, name):
    a = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise ValueError(f"{name} point list is empty")
    return a


def nearest_correspondences(src, dst, tree: cKDTree | None = None, k: int = 4):
    """Nearest ``dst`` point for each ``src`` point.

    Returns ``(src_idx, dst_idx, dist)`` arrays. Results equal an exhaustive
    search; among equidistant neighbours the smallest dst index wins.
    """
    src = _as_points(src, "src")
    dst = _as_points(dst, "dst")
    if tree is None:
        tree = cKDTree(dst)
    k = min(k, len(dst))
    _, cand = tree.query(src, k=k)
    cand = np.asarray(cand).reshape(len(src), k)
    # exact distances recomputed so ties and values match brute force bit for bit
    d = np.sqrt(((src[:, None, :] - dst[cand]) ** 2).sum(-1))
    best = d.min(axis=1)
    tied = d == best[:, None]
    masked = np.where(tied, cand, np.iinfo(np.int64).max)
    dst_idx = masked.min(axis=1)
    # every candidate tied: more equidistant points may lie beyond k
    if k < len(dst):
        for i in np.flatnonzero(tied.all(axis=1)):
            ball = tree.query_ball_point(src[i], best[i] * (1 + 1e-9) + 1e-12)
            ball = np.asarray(sorted(ball))
            dd = np.sqrt(((src[i] - dst[ball]) ** 2).sum(-1))
            dst_idx[i] = ball[dd == dd.min()].min()
            best[i] = dd.min()
    return np.arange(len(src)), dst_idx, best


def kabsch_fit(src, dst) -> RigidTransform:
    """Least-squares rigid transform with ``R @ src_i + t ≈ dst_i``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must pair up")
    if len(src) < 3:
        raise DegenerateFitError(f"need at least 3 pairs, got {len(src)}")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - cs, dst - cd
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateFitError("source points are coincident or collinear")
    H = A.T @ B
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    # re-orthonormalise against accumulated rounding
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, cd - R @ cs)


def _rms(d):
    return float(np.sqrt(np.mean(d * d)))


def icp_register(src, dst, max_iterations: int = 100, tol: float = 1e-4,
                 init: RigidTransform | None = None) -> IcpResult:
    """Point-to-point ICP from identity (or ``init``).

    ``history`` holds the post-fit RMS residual of every iteration, preceded
    by the residual of the starting pose; it is non-increasing.
    """
    src = _as_points(src, "src")
    dst = _as_points(dst, "dst")
    if len(src) < 3 or len(dst) < 3:
        raise DegenerateFitError("both clouds need at least 3 points")
    tree = cKDTree(dst)
    xf = init or RigidTransform.identity()
    _, idx, dist = nearest_correspondences(xf.apply(src), dst, tree)
    history = [_rms(dist)]
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        moved = xf.apply(src)
        if it > 1:
            _, idx, dist = nearest_correspondences(moved, dst, tree)
        step = kabsch_fit(moved, dst[idx])
        resid = step.apply(moved) - dst[idx]
        post = _rms(np.sqrt((resid * resid).sum(-1)))
        pre = _rms(dist)
        # the fit is optimal for these pairs, so only rounding can make it worse
        if post <= pre:
            xf = step.compose(xf)
        history.append(min(post, pre))
        if abs(history[-2] - history[-1]) < tol:
            converged = True
            break
    return IcpResult(xf, history[-1], it, converged, history)
