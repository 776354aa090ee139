"""Sequence loading, frame aggregation, and ground removal.

Dataset layout (all little-endian, one directory per sequence):
    points/<frame:06d>.bin   float32 quadruples (x, y, z, intensity)
    poses.txt                frame_id + 12 floats (row-major 3x4, sensor->world)
    calib.txt                keys fx fy cx cy image_w image_h, lidar_to_cam (12 floats)
    detections.jsonl         {frame, class, rect, mask_rle, track_id, score}
    timestamps.txt           one float (seconds) per frame
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CalibrationInvalid, GroundFitFailed, MalformedRecord, MissingFile
from .geom import CameraModel, PointCloud, Rect2D, RigidTransform, transform_points


# ---------------------------------------------------------------------------
# masks

def rle_encode(mask: np.ndarray) -> dict:
    """Run-length encode a binary bitmap (row-major, runs start with zeros)."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel()
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": []}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in rle["counts"]:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate with a square structuring element of the given pixel radius."""
    if radius <= 0:
        return mask.astype(bool)
    footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(mask.astype(bool), structure=footprint)


# ---------------------------------------------------------------------------
# frame records

@dataclass
class Detection2D:
    class_id: int
    rect: Rect2D
    mask: np.ndarray
    track_id: int
    score: float = 1.0

    def validate(self) -> None:
        self.rect.validate()
        ys, xs = np.nonzero(self.mask)
        if len(ys) == 0:
            raise ValueError("empty detection mask")
        if (
            xs.min() < self.rect.x_min or xs.max() > self.rect.x_max
            or ys.min() < self.rect.y_min or ys.max() > self.rect.y_max
        ):
            raise ValueError("mask pixels outside detection rect")

    @property
    def pixel_height(self) -> float:
        return self.rect.height


@dataclass
class FrameBundle:
    frame_id: int
    timestamp: float
    cloud: PointCloud
    pose: RigidTransform
    detections: list
    camera: CameraModel


@dataclass
class GroundModel:
    """Fitted ground plane a*x + b*y + c*z + d = 0 with a BEV height grid."""

    plane: np.ndarray
    grid_cell: float = 0.5
    grid_origin: tuple = (0.0, 0.0)
    height_grid: dict = field(default_factory=dict)

    def __post_init__(self):
        self.plane = np.asarray(self.plane, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(self.plane[:3])
        if norm > 0:
            self.plane = self.plane / norm

    def plane_height(self, x: float, y: float) -> float:
        a, b, c, d = self.plane
        if abs(c) < 1e-9:
            return 0.0
        return -(a * x + b * y + d) / c

    def cell_index(self, x: float, y: float) -> tuple:
        return (
            int(np.floor((x - self.grid_origin[0]) / self.grid_cell)),
            int(np.floor((y - self.grid_origin[1]) / self.grid_cell)),
        )

    def height_at(self, x: float, y: float) -> float:
        """Local ground height: grid cell value when present, plane otherwise."""
        cell = self.cell_index(x, y)
        if cell in self.height_grid:
            return self.height_grid[cell]
        return self.plane_height(x, y)


# ---------------------------------------------------------------------------
# sequence IO

def _read_lines(path: Path):
    if not path.exists():
        raise MissingFile(str(path))
    return path.read_text().splitlines()


def _parse_pose_line(path, i, line) -> tuple:
    parts = line.split()
    if len(parts) != 13:
        raise MalformedRecord(path, i + 1, f"expected 13 fields, got {len(parts)}")
    try:
        frame_id = int(parts[0])
        vals = np.array([float(p) for p in parts[1:]]).reshape(3, 4)
    except ValueError as exc:
        raise MalformedRecord(path, i + 1, str(exc)) from exc
    return frame_id, RigidTransform(vals[:, :3], vals[:, 3])


def read_calib(path: Path) -> CameraModel:
    entries = {}
    for i, line in enumerate(_read_lines(path)):
        line = line.strip()
        if not line:
            continue
        parts = line.replace(":", " ").split()
        try:
            entries[parts[0]] = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise MalformedRecord(path, i + 1, str(exc)) from exc
    required = ["fx", "fy", "cx", "cy", "image_w", "image_h", "lidar_to_cam"]
    for key in required:
        if key not in entries:
            raise CalibrationInvalid(f"{path}: missing key {key!r}")
    mat = np.array(entries["lidar_to_cam"])
    if mat.size != 12:
        raise CalibrationInvalid(f"{path}: lidar_to_cam needs 12 floats")
    mat = mat.reshape(3, 4)
    cam = CameraModel(
        fx=entries["fx"][0], fy=entries["fy"][0],
        cx=entries["cx"][0], cy=entries["cy"][0],
        image_w=int(entries["image_w"][0]), image_h=int(entries["image_h"][0]),
        lidar_to_cam=RigidTransform(mat[:, :3], mat[:, 3]),
    )
    try:
        cam.validate()
        cam.lidar_to_cam.validate(tol=1e-6)
    except ValueError as exc:
        raise CalibrationInvalid(f"{path}: {exc}") from exc
    return cam


def write_calib(path: Path, cam: CameraModel) -> None:
    tf = np.hstack([cam.lidar_to_cam.rotation, cam.lidar_to_cam.translation[:, None]])
    lines = [
        f"fx {float(cam.fx)!r}",
        f"fy {float(cam.fy)!r}",
        f"cx {float(cam.cx)!r}",
        f"cy {float(cam.cy)!r}",
        f"image_w {cam.image_w}",
        f"image_h {cam.image_h}",
        "lidar_to_cam " + " ".join(repr(float(v)) for v in tf.ravel()),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path: Path) -> PointCloud:
    if not Path(path).exists():
        raise MissingFile(str(path))
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise MalformedRecord(path, 0, "point file length not a multiple of 4 floats")
    return PointCloud(raw.reshape(-1, 4).astype(np.float64))


def write_points(path: Path, cloud: PointCloud) -> None:
    cloud.points.astype("<f4").tofile(path)


def read_detections(path: Path) -> dict:
    """Detections grouped by frame id; an absent file means no detections."""
    per_frame = {}
    if not Path(path).exists():
        return per_frame
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            det = Detection2D(
                class_id=int(rec["class"]),
                rect=Rect2D(*[float(v) for v in rec["rect"]]),
                mask=rle_decode(rec["mask_rle"]),
                track_id=int(rec["track_id"]),
                score=float(rec.get("score", 1.0)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedRecord(path, i + 1, str(exc)) from exc
        per_frame.setdefault(int(rec["frame"]), []).append(det)
    return per_frame


def write_detections(path: Path, per_frame: dict) -> None:
    with open(path, "w") as fh:
        for frame_id in sorted(per_frame):
            for det in per_frame[frame_id]:
                rec = {
                    "frame": frame_id,
                    "class": det.class_id,
                    "rect": [det.rect.x_min, det.rect.y_min,
                             det.rect.x_max, det.rect.y_max],
                    "mask_rle": rle_encode(det.mask),
                    "track_id": det.track_id,
                    "score": det.score,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_sequence(dir_path) -> list:
    """Load a sequence directory into FrameBundles ordered by timestamp."""
    root = Path(dir_path)
    pose_path = root / "poses.txt"
    poses = {}
    for i, line in enumerate(_read_lines(pose_path)):
        if not line.strip():
            continue
        frame_id, tf = _parse_pose_line(pose_path, i, line)
        poses[frame_id] = tf

    ts_path = root / "timestamps.txt"
    stamps = []
    for i, line in enumerate(_read_lines(ts_path)):
        if not line.strip():
            continue
        try:
            stamps.append(float(line))
        except ValueError as exc:
            raise MalformedRecord(ts_path, i + 1, str(exc)) from exc
    frame_ids = sorted(poses)
    if len(stamps) != len(frame_ids):
        raise MalformedRecord(ts_path, 0, "timestamp count != pose count")

    cam = read_calib(root / "calib.txt")
    detections = read_detections(root / "detections.jsonl")

    bundles = []
    for frame_id, ts in zip(frame_ids, stamps):
        cloud = read_points(root / "points" / f"{frame_id:06d}.bin")
        cloud.frame_id = frame_id
        bundles.append(FrameBundle(
            frame_id=frame_id,
            timestamp=ts,
            cloud=cloud,
            pose=poses[frame_id],
            detections=detections.get(frame_id, []),
            camera=cam,
        ))
    bundles.sort(key=lambda b: b.timestamp)
    for a, b in zip(bundles, bundles[1:]):
        if not b.timestamp > a.timestamp:
            raise MalformedRecord(ts_path, 0, "timestamps not strictly increasing")
    return bundles


# ---------------------------------------------------------------------------
# aggregation and ground removal

def aggregate_frames(frames: list, center_idx: int, window: int,
                     return_tags: bool = False):
    """Union of clouds in [center-window, center+window], expressed in the
    center frame's sensor coordinates.

    With ``return_tags`` also returns the source frame id of every point.
    """
    if window < 0:
        raise ValueError("window must be >= 0")
    center = frames[center_idx]
    world_to_center = center.pose.inverse()
    lo = max(0, center_idx - window)
    hi = min(len(frames), center_idx + window + 1)
    chunks = []
    tags = []
    for i in range(lo, hi):
        tf = world_to_center.compose(frames[i].pose)
        chunks.append(transform_points(frames[i].cloud, tf).points)
        tags.append(np.full(len(chunks[-1]), frames[i].frame_id, dtype=int))
    cloud = PointCloud(np.concatenate(chunks, axis=0),
                       frame_id=center.frame_id)
    if return_tags:
        return cloud, np.concatenate(tags)
    return cloud


def _plane_from_points(p0, p1, p2):
    normal = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        return None
    normal = normal / norm
    if normal[2] < 0:
        normal = -normal
    return np.append(normal, -normal @ p0)


def remove_ground(cloud: PointCloud, cfg: dict | None = None,
                  rng: np.random.Generator | None = None):
    """Single-plane RANSAC ground removal plus a BEV height grid.

    Candidates for plane fitting are restricted to the low-z band of the
    cloud; the fitted plane then removes near-plane points from the whole
    cloud.  Raises GroundFitFailed when the candidate inlier ratio is below
    the configured minimum.
    """
    if len(cloud) < 50:
        raise ValueError("need at least 50 points for ground removal")
    cfg = cfg or {}
    iterations = int(cfg.get("ransac_iterations", 1000))
    d_g = float(cfg.get("inlier_distance", 0.15))
    cell = float(cfg.get("grid_cell", 0.5))
    min_ratio = float(cfg.get("min_inlier_ratio", 0.1))
    rng = rng if rng is not None else np.random.default_rng(0)

    xyz = cloud.xyz
    z_band = np.percentile(xyz[:, 2], 20.0) + 0.5
    candidates = xyz[xyz[:, 2] <= z_band]
    n = len(candidates)
    if n < 3:
        raise GroundFitFailed("too few low-z candidates")

    best_plane = None
    best_count = -1
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        plane = _plane_from_points(*candidates[idx])
        if plane is None or plane[2] < 0.7:  # near-horizontal planes only
            continue
        dist = np.abs(candidates @ plane[:3] + plane[3])
        count = int(np.count_nonzero(dist <= d_g))
        if count > best_count:
            best_count = count
            best_plane = plane
    if best_plane is None or best_count < min_ratio * n:
        raise GroundFitFailed(
            f"inlier ratio {max(best_count, 0) / n:.3f} below {min_ratio}"
        )

    # least-squares refinement on the consensus set
    dist = np.abs(candidates @ best_plane[:3] + best_plane[3])
    inliers = candidates[dist <= d_g]
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    normal = vt[-1]
    if normal[2] < 0:
        normal = -normal
    if normal[2] >= 0.7:
        best_plane = np.append(normal, -normal @ centroid)

    dist_all = np.abs(xyz @ best_plane[:3] + best_plane[3])
    keep = dist_all > d_g
    nonground = PointCloud(cloud.points[keep], frame_id=cloud.frame_id)

    ground_pts = xyz[~keep]
    model = GroundModel(best_plane, grid_cell=cell)
    if len(ground_pts):
        cx = np.floor(ground_pts[:, 0] / cell).astype(int)
        cy = np.floor(ground_pts[:, 1] / cell).astype(int)
        grid = {}
        for (ix, iy), z in zip(zip(cx.tolist(), cy.tolist()), ground_pts[:, 2]):
            key = (ix, iy)
            if key in grid:
                total, cnt = grid[key]
                grid[key] = (total + z, cnt + 1)
            else:
                grid[key] = (z, 1)
        model.height_grid = {k: total / cnt for k, (total, cnt) in grid.items()}
    return nonground, model
