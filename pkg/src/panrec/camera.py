"""Pinhole camera model, view frustum construction, and frustum culling.

Camera convention: +x right, +y down, +z forward into the scene, matching
image coordinates, so unprojection is sign-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, FileFormatError, InvalidArgumentError
from .mesh import TriangleMesh

# Metric slack for half-space boundary tests; far below any voxel size.
PLANE_EPS = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the metric depth range of the view.

    The paper never fixes its near/far planes, so the depth range is part of
    the per-run camera description rather than a library constant.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_near: float
    z_far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")
        if not (0 < self.z_near < self.z_far):
            raise InvalidArgumentError(f"need 0 < z_near < z_far, got [{self.z_near}, {self.z_far}]")

    @classmethod
    def from_json(cls, path) -> "CameraIntrinsics":
        try:
            raw = json.loads(Path(path).read_text())
            return cls(**{k: raw[k] for k in
                          ("fx", "fy", "cx", "cy", "width", "height", "z_near", "z_far")})
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FileFormatError(f"bad intrinsics sidecar {path}: {exc}") from exc

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth in meters. Entries that are non-finite or <= 0
    are the invalid marker; every valid depth is finite and positive."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise InvalidArgumentError("depth map must be a (H, W) array")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values) & (self.values > 0)

    def matches(self, intrinsics: CameraIntrinsics) -> bool:
        return self.width == intrinsics.width and self.height == intrinsics.height


def unproject_pixel(u: float, v: float, d: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-space point for pixel (u, v) at z-depth d:
    ((u - cx) d / fx, (v - cy) d / fy, d)."""
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise InvalidArgumentError(f"pixel ({u}, {v}) outside image bounds")
    if d <= 0:
        raise InvalidArgumentError(f"depth must be positive, got {d}")
    return np.array([
        (u - intrinsics.cx) * d / intrinsics.fx,
        (v - intrinsics.cy) * d / intrinsics.fy,
        d,
    ])


def project_point(p, intrinsics: CameraIntrinsics) -> tuple[float, float, float]:
    """(u, v, d) image coordinates of a camera-space point with p.z > 0."""
    p = np.asarray(p, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCameraError(f"point with z={p[2]} is behind the camera")
    u = intrinsics.fx * p[0] / p[2] + intrinsics.cx
    v = intrinsics.fy * p[1] / p[2] + intrinsics.cy
    return float(u), float(v), float(p[2])


@dataclass(frozen=True)
class Frustum:
    """Six oriented planes (unit normal n, offset d); a point is inside iff
    n . p + d >= -PLANE_EPS for all six."""

    planes: np.ndarray

    @classmethod
    def from_intrinsics(cls, intrinsics: CameraIntrinsics) -> "Frustum":
        k = intrinsics
        # Half-spaces equivalent to 0 <= u <= W, 0 <= v <= H, z_near <= z <= z_far.
        planes = np.array([
            [0.0, 0.0, 1.0, -k.z_near],            # near:  z >= z_near
            [0.0, 0.0, -1.0, k.z_far],             # far:   z <= z_far
            [k.fx, 0.0, k.cx, 0.0],                # left:  u >= 0
            [-k.fx, 0.0, k.width - k.cx, 0.0],     # right: u <= W
            [0.0, k.fy, k.cy, 0.0],                # top:   v >= 0
            [0.0, -k.fy, k.height - k.cy, 0.0],    # bottom: v <= H
        ])
        norms = np.linalg.norm(planes[:, :3], axis=1, keepdims=True)
        planes = planes / norms
        frustum = cls(planes=planes)
        axis_mid = np.array([0.0, 0.0, 0.5 * (k.z_near + k.z_far)])
        if not frustum.contains(axis_mid):
            raise InvalidArgumentError("degenerate frustum: optical axis midpoint not inside")
        return frustum

    def contains(self, points) -> np.ndarray | bool:
        """Half-space test; boundary points within PLANE_EPS count as inside.
        Accepts a single point or an (N, 3) array."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        signed = pts @ self.planes[:, :3].T + self.planes[:, 3]
        inside = (signed >= -PLANE_EPS).all(axis=1)
        return bool(inside[0]) if single else inside


def frustum_contains(frustum: Frustum, point) -> bool:
    """True iff the camera-space point satisfies all six half-space tests."""
    return bool(np.all(frustum.contains(np.atleast_2d(point))))


def cull_mesh_to_frustum(mesh: TriangleMesh, frustum: Frustum) -> TriangleMesh:
    """Keep triangles with at least one vertex inside the frustum (no plane
    clipping; voxel-scale evaluation makes exact clipping unnecessary).
    Degenerate zero-area triangles are dropped."""
    if mesh.is_empty:
        return mesh.select_faces(np.zeros(0, dtype=bool))
    inside = frustum.contains(mesh.vertices)
    keep = inside[mesh.faces].any(axis=1) & (mesh.areas() > 0)
    return mesh.select_faces(keep)
