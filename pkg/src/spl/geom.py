"""Core 3D/2D geometry: rigid transforms, camera projection, oriented boxes, IoU.

Coordinate conventions: the LiDAR frame is right-handed with z up; box yaw is
measured about +z from the +x axis and normalized to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PointCloud",
    "RigidTransform",
    "CameraModel",
    "Box3D",
    "Rect2D",
    "wrap_angle",
    "transform_points",
    "project_points",
    "box3d_corners",
    "box_bev_corners",
    "iou_rect2d",
    "iou_bev",
    "iou_3d",
    "polygon_area",
    "clip_polygon",
]


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass
class PointCloud:
    """Points as an (N, 4) float array: x, y, z in meters plus intensity in [0, 1]."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite values")
        i = self.intensity
        if len(self) and (i.min() < 0.0 or i.max() > 1.0):
            raise ValueError("intensity outside [0, 1]")


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    def validate(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=tol):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > max(tol, 1e-9):
            raise ValueError("rotation determinant is not +1")

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self o other (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int
    lidar_to_cam: RigidTransform = field(default_factory=RigidTransform.identity)

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError("image size must be positive")


@dataclass
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        self.yaw = wrap_angle(float(self.yaw))

    def validate(self) -> None:
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError("box dimensions must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])


@dataclass
class Rect2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def validate(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("inverted rectangle")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)


def transform_points(cloud: PointCloud, tf: RigidTransform) -> PointCloud:
    """Apply a rigid transform to every point; intensity is untouched."""
    out = cloud.points.copy()
    out[:, :3] = tf.apply(cloud.xyz)
    return PointCloud(out, frame_id=cloud.frame_id)


def project_points(cloud: PointCloud, cam: CameraModel) -> np.ndarray:
    """Project points through the pinhole model.

    Returns an (N, 4) array of (u, v, depth, in_image).  Points behind the
    camera keep a finite (u, v) placeholder but are flagged out of image.
    """
    p_cam = cam.lidar_to_cam.apply(cloud.xyz)
    z = p_cam[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    u = cam.fx * p_cam[:, 0] / safe_z + cam.cx
    v = cam.fy * p_cam[:, 1] / safe_z + cam.cy
    in_image = (
        (z > 0)
        & (u >= 0)
        & (u < cam.image_w)
        & (v >= 0)
        & (v < cam.image_h)
    )
    return np.stack([u, v, z, in_image.astype(np.float64)], axis=1)


_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [1, -1, -1],
        [-1, -1, -1],
        [-1, 1, -1],
        [1, 1, 1],
        [1, -1, 1],
        [-1, -1, 1],
        [-1, 1, 1],
    ],
    dtype=np.float64,
)


def box3d_corners(box: Box3D) -> np.ndarray:
    """Eight corners of the oriented cuboid, bottom face first."""
    half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0])
    local = _CORNER_SIGNS * half
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def box_bev_corners(box: Box3D) -> np.ndarray:
    """Four BEV corners (counter-clockwise) of the oriented rectangle."""
    return box3d_corners(box)[:4, :2][::-1]


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon (positive for CCW order)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against a convex CCW clipper."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            return np.zeros((0, 2))
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = (b[0] - a[0], b[1] - a[1])
        input_pts = output
        output = []

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0

        m = len(input_pts)
        for j in range(m):
            cur = input_pts[j]
            prev = input_pts[j - 1]
            cur_in = inside(cur)
            prev_in = inside(prev)
            if cur_in != prev_in:
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = edge[0] * dy - edge[1] * dx
                if abs(denom) > 1e-15:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    t = min(1.0, max(0.0, t))
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
    return np.asarray(output).reshape(-1, 2)


def iou_rect2d(a: Rect2D, b: Rect2D) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    pa = box_bev_corners(a)
    pb = box_bev_corners(b)
    clipped = clip_polygon(pa, pb)
    return abs(polygon_area(clipped))


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = _bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def iou_3d(a: Box3D, b: Box3D) -> float:
    inter_bev = _bev_intersection_area(a, b)
    z_lo = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    z_hi = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    inter = inter_bev * max(0.0, z_hi - z_lo)
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)
