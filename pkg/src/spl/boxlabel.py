"""3D box pseudo labels: fitting, filtering, temporal refinement, splitting.

Boxes are fitted per frame from object point sets, gated by per-class size
bounds and (for vehicles) a surface proximity ratio, refined along tracks
with velocity cues, and finally split into GT-supervision and pseudo labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyObject, TooFewPoints, TrackTooShort
from .geom import (
    Box3D,
    CameraModel,
    Rect2D,
    box3d_corners,
    box_bev_corners,
    iou_bev,
    iou_rect2d,
    wrap_angle,
)
from .ingest import GroundModel
from .pointlabel import PointLabel

DEG = math.pi / 180.0
_EDGE_FLOOR = 0.01  # meters; closeness distance floor


@dataclass
class BoxLabel:
    box: Box3D
    class_id: int
    track_id: int
    frame_id: int
    velocity: np.ndarray | None = None
    spr: float | None = None
    source: str = "fitted"


@dataclass
class TrackEntry:
    timestamp: float
    frame_id: int
    point_label: PointLabel
    box_label: BoxLabel | None = None


@dataclass
class TrackHistory:
    track_id: int
    class_id: int
    entries: list = field(default_factory=list)

    def add(self, entry: TrackEntry) -> None:
        if self.entries and entry.timestamp <= self.entries[-1].timestamp:
            raise ValueError("track timestamps must be strictly increasing")
        self.entries.append(entry)


@dataclass
class LabelSet:
    gt_supervision: list = field(default_factory=list)
    pseudo_boxes: list = field(default_factory=list)
    pseudo_points: list = field(default_factory=list)


def _edge_scores(thetas: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Edge-closeness score of the axis-aligned bounding rectangle at each
    candidate yaw: sum of 1 / max(distance-to-nearest-edge, 1 cm)."""
    c, s = np.cos(thetas)[:, None], np.sin(thetas)[:, None]
    rx = x[None, :] * c + y[None, :] * s  # (T, N)
    ry = -x[None, :] * s + y[None, :] * c
    x_min, x_max = rx.min(axis=1, keepdims=True), rx.max(axis=1, keepdims=True)
    y_min, y_max = ry.min(axis=1, keepdims=True), ry.max(axis=1, keepdims=True)
    d_edge = np.minimum(
        np.minimum(rx - x_min, x_max - rx),
        np.minimum(ry - y_min, y_max - ry),
    )
    return (1.0 / np.maximum(d_edge, _EDGE_FLOOR)).sum(axis=1)


def fit_lshape(xyz: np.ndarray, min_points: int = 1) -> Box3D:
    """Fit an oriented box by a 1-degree yaw search over [0, 90), refined
    locally at 0.1 degrees, maximizing edge closeness
    (sum of 1 / max(distance-to-nearest-edge, 1 cm)).

    The returned box has l >= w; yaw is only determined modulo 90 degrees
    here and gets disambiguated later from velocity.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) < max(min_points, 3):
        raise TooFewPoints(f"{len(xyz)} points, need {max(min_points, 3)}")

    x, y = xyz[:, 0], xyz[:, 1]
    coarse = np.arange(0.0, 90.0) * DEG
    best = coarse[int(np.argmax(_edge_scores(coarse, x, y)))]
    # refine locally at 0.1 degrees: a degree of residual yaw error already
    # inflates the min/max extents by roughly w * sin(error)
    fine = best + np.arange(-15, 16) * 0.1 * DEG
    scores = _edge_scores(fine, x, y)
    theta = float(fine[int(np.argmax(scores))])

    ct, st = math.cos(theta), math.sin(theta)
    rx = x * ct + y * st
    ry = -x * st + y * ct
    bx0, bx1 = float(rx.min()), float(rx.max())
    by0, by1 = float(ry.min()), float(ry.max())
    l = max(bx1 - bx0, 1e-3)
    w = max(by1 - by0, 1e-3)
    mx, my = (bx0 + bx1) / 2.0, (by0 + by1) / 2.0
    cx = mx * math.cos(theta) - my * math.sin(theta)
    cy = mx * math.sin(theta) + my * math.cos(theta)
    yaw = theta
    if w > l:
        l, w = w, l
        yaw = theta + math.pi / 2.0

    z_lo, z_hi = float(xyz[:, 2].min()), float(xyz[:, 2].max())
    h = max(z_hi - z_lo, 1e-3)
    return Box3D(cx, cy, (z_lo + z_hi) / 2.0, l, w, h, wrap_angle(yaw))


def ground_snap(box: Box3D, ground: GroundModel) -> Box3D:
    """Place the bottom face on the local ground; height is preserved."""
    g = ground.height_at(box.cx, box.cy)
    return Box3D(box.cx, box.cy, g + box.h / 2.0, box.l, box.w, box.h, box.yaw)


def canonicalize_box(box: Box3D) -> Box3D:
    """Ensure l >= w, rotating yaw by 90 degrees when swapping."""
    if box.w <= box.l:
        return box
    return Box3D(box.cx, box.cy, box.cz, box.w, box.l, box.h,
                 wrap_angle(box.yaw + math.pi / 2.0))


def size_filter(box: Box3D, class_cfg, low: float = 0.8,
                high: float = 1.2) -> bool:
    """Accept boxes whose canonical dims fall in [min*low, max*high]."""
    b = canonicalize_box(box)
    dims = (b.l, b.w, b.h)
    for d, lo, hi in zip(dims, class_cfg.min_size, class_cfg.max_size):
        if d < lo * low or d > hi * high:
            return False
    return True


def spr(box: Box3D, xyz: np.ndarray, d_surf: float = 0.2) -> float:
    """Surface Proximity Ratio: fraction of points within d_surf of one of
    the four BEV side faces (evaluated within the box's z extent)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        raise EmptyObject("SPR needs at least one point")
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    bx = dx * c + dy * s
    by = -dx * s + dy * c
    d_sides = np.minimum(
        np.abs(np.abs(bx) - box.l / 2.0),
        np.abs(np.abs(by) - box.w / 2.0),
    )
    z_ok = (xyz[:, 2] >= box.cz - box.h / 2.0 - d_surf) & \
           (xyz[:, 2] <= box.cz + box.h / 2.0 + d_surf)
    close = (d_sides <= d_surf) & z_ok
    return float(np.count_nonzero(close)) / len(xyz)


def track_velocity(track: TrackHistory) -> dict:
    """Per-frame velocity (m/s) from point-label centroid displacements.

    Interior frames average the backward and forward interval velocities,
    weighting each by the opposite interval (the second-order nonuniform
    central difference); boundary frames use the one-sided difference.
    """
    entries = track.entries
    if len(entries) < 2:
        raise TrackTooShort(f"track {track.track_id}: {len(entries)} entries")
    pos = np.array([e.point_label.position for e in entries])
    ts = np.array([e.timestamp for e in entries])
    dt = np.diff(ts)
    seg_v = (pos[1:] - pos[:-1]) / dt[:, None]

    out = {}
    for i, e in enumerate(entries):
        if i == 0:
            v = seg_v[0]
        elif i == len(entries) - 1:
            v = seg_v[-1]
        else:
            dtb, dtf = dt[i - 1], dt[i]
            v = (seg_v[i - 1] * dtf + seg_v[i] * dtb) / (dtb + dtf)
        out[e.frame_id] = v
    return out


def _bev_speed(v) -> float:
    return float(np.linalg.norm(np.asarray(v)[:2]))


def _reanchor(old: Box3D, l: float, w: float, h: float) -> Box3D:
    """Resize a box keeping its nearest BEV corner and bottom face fixed."""
    corners = box_bev_corners(old)
    near = int(np.argmin(np.linalg.norm(corners, axis=1)))
    corner = corners[near]
    c, s = math.cos(old.yaw), math.sin(old.yaw)
    # sign pattern of the near corner in the box frame
    dx, dy = corner[0] - old.cx, corner[1] - old.cy
    sx = 1.0 if dx * c + dy * s >= 0 else -1.0
    sy = 1.0 if -dx * s + dy * c >= 0 else -1.0
    off_x = sx * l / 2.0
    off_y = sy * w / 2.0
    cx = corner[0] - (off_x * c - off_y * s)
    cy = corner[1] - (off_x * s + off_y * c)
    z_bottom = old.cz - old.h / 2.0
    return Box3D(cx, cy, z_bottom + h / 2.0, l, w, h, old.yaw)


def _refit_at_yaw(xyz: np.ndarray, yaw: float, template: Box3D) -> Box3D:
    """Minimal BEV rectangle at a fixed yaw; z extent from the template."""
    c, s = math.cos(yaw), math.sin(yaw)
    bx = xyz[:, 0] * c + xyz[:, 1] * s
    by = -xyz[:, 0] * s + xyz[:, 1] * c
    l = max(float(bx.max() - bx.min()), 1e-3)
    w = max(float(by.max() - by.min()), 1e-3)
    mx, my = (bx.max() + bx.min()) / 2.0, (by.max() + by.min()) / 2.0
    cx = mx * c - my * s
    cy = mx * s + my * c
    return Box3D(cx, cy, template.cz, l, w, template.h, wrap_angle(yaw))


def refine_temporal(track: TrackHistory, velocities: dict,
                    v_still: float = 0.5,
                    points_by_frame: dict | None = None) -> TrackHistory:
    """Apply the four motion-based refinement rules to a track's boxes.

    1. Pedestrians: align yaw with velocity when moving, refit the rectangle.
    2. Vehicles/Cyclists: flip yaw when it opposes the velocity direction.
    3. Vehicles: grow dims to the track maximum, re-anchored at the near corner.
    4. Cyclist tracks that never move faster than v_still lose all boxes.
    """
    cls = track.class_id
    entries = [TrackEntry(e.timestamp, e.frame_id, e.point_label,
                          e.box_label) for e in track.entries]

    if cls == 2:  # rule 4: stationary cyclists
        max_speed = max((_bev_speed(velocities[e.frame_id])
                         for e in entries if e.frame_id in velocities),
                        default=0.0)
        if max_speed <= v_still:
            for e in entries:
                e.box_label = None
            return TrackHistory(track.track_id, cls, entries)

    for e in entries:
        if e.box_label is None or e.frame_id not in velocities:
            continue
        v = velocities[e.frame_id]
        speed = _bev_speed(v)
        box = e.box_label.box
        if cls == 1:  # rule 1: pedestrians follow the velocity heading
            if speed > v_still:
                # rotate in place; dims stay as fitted, since re-tightening
                # onto the visible surface would collapse partial views
                yaw = math.atan2(v[1], v[0])
                new_box = Box3D(box.cx, box.cy, box.cz, box.l, box.w,
                                box.h, yaw)
                e.box_label = BoxLabel(new_box, cls, track.track_id,
                                       e.frame_id, velocity=np.asarray(v),
                                       spr=e.box_label.spr, source="refined")
        else:  # rule 2: vehicles and cyclists never face backwards
            if speed > v_still:
                heading = math.atan2(v[1], v[0])
                if abs(wrap_angle(box.yaw - heading)) > math.pi / 2.0:
                    new_box = Box3D(box.cx, box.cy, box.cz, box.l, box.w,
                                    box.h, wrap_angle(box.yaw + math.pi))
                    e.box_label = BoxLabel(new_box, cls, track.track_id,
                                           e.frame_id, velocity=np.asarray(v),
                                           spr=e.box_label.spr,
                                           source="refined")

    if cls == 0:  # rule 3: vehicle dims -> track componentwise maximum
        boxes = [e.box_label.box for e in entries if e.box_label is not None]
        if boxes:
            l_max = max(b.l for b in boxes)
            w_max = max(b.w for b in boxes)
            h_max = max(b.h for b in boxes)
            for e in entries:
                if e.box_label is None:
                    continue
                b = e.box_label.box
                if (b.l, b.w, b.h) != (l_max, w_max, h_max):
                    new_box = _reanchor(b, l_max, w_max, h_max)
                    e.box_label = BoxLabel(new_box, cls, track.track_id,
                                           e.frame_id,
                                           velocity=e.box_label.velocity,
                                           spr=e.box_label.spr,
                                           source="refined")

    for e in entries:
        if e.box_label is not None and e.frame_id in velocities:
            e.box_label.velocity = np.asarray(velocities[e.frame_id])
    return TrackHistory(track.track_id, cls, entries)


def projected_box_rect(box: Box3D, cam: CameraModel) -> Rect2D | None:
    """Axis-aligned image rectangle of the projected 3D corners."""
    corners = box3d_corners(box)
    p_cam = cam.lidar_to_cam.apply(corners)
    z = p_cam[:, 2]
    if np.any(z <= 0.1):
        return None
    u = cam.fx * p_cam[:, 0] / z + cam.cx
    v = cam.fy * p_cam[:, 1] / z + cam.cy
    return Rect2D(float(u.min()), float(v.min()), float(u.max()), float(v.max()))


def track_is_dynamic(speeds: list, v_dyn: float = 1.0,
                     sustain: int = 2) -> bool:
    """True when speed stays at or above v_dyn for >= sustain consecutive frames."""
    run = 0
    for s in speeds:
        run = run + 1 if s >= v_dyn else 0
        if run >= sustain:
            return True
    return False


def split_labels(box_labels: list, point_labels: list, track_speeds: dict,
                 detection_rects: dict, cam: CameraModel,
                 iou_thr: float = 0.4, v_dyn: float = 1.0,
                 mode: str = "unsupervised",
                 human_boxes: list | None = None,
                 gt_overlap_iou: float = 0.1) -> dict:
    """Split labels into GT-supervision and pseudo sets, per frame.

    Unsupervised mode promotes a fitted box when its projected-corners AABB
    overlaps its mask AABB at IoU >= iou_thr and its track shows sustained
    motion; sparse mode takes ``human_boxes`` as GT and keeps every generated
    label pseudo.  Pseudo entries overlapping a GT box (BEV IoU above
    ``gt_overlap_iou``, or a point inside the GT footprint) are dropped.

    ``track_speeds`` maps track_id to a list of per-frame BEV speeds;
    ``detection_rects`` maps (frame_id, track_id) to the mask AABB.
    Returns {frame_id: LabelSet}.
    """
    frames = sorted({bl.frame_id for bl in box_labels}
                    | {pl.frame_id for pl in point_labels}
                    | {hb.frame_id for hb in (human_boxes or [])})
    out = {f: LabelSet() for f in frames}

    promoted = set()
    if mode == "sparse":
        for hb in human_boxes or []:
            out[hb.frame_id].gt_supervision.append(hb)
    else:
        for bl in box_labels:
            rect = detection_rects.get((bl.frame_id, bl.track_id))
            if rect is None:
                continue
            proj = projected_box_rect(bl.box, cam)
            if proj is None:
                continue
            aligned = iou_rect2d(proj, rect) >= iou_thr
            dynamic = track_is_dynamic(track_speeds.get(bl.track_id, []),
                                       v_dyn=v_dyn)
            if aligned and dynamic:
                out[bl.frame_id].gt_supervision.append(bl)
                promoted.add(id(bl))

    for bl in box_labels:
        if id(bl) in promoted:
            continue
        ls = out[bl.frame_id]
        if any(iou_bev(bl.box, g.box) > gt_overlap_iou
               for g in ls.gt_supervision):
            continue
        ls.pseudo_boxes.append(bl)

    for pl in point_labels:
        ls = out.get(pl.frame_id)
        if ls is None:
            continue
        if any(_point_in_bev(pl.position, g.box) for g in ls.gt_supervision):
            continue
        ls.pseudo_points.append(pl)
    return out


def _point_in_bev(position, box: Box3D) -> bool:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = position[0] - box.cx
    dy = position[1] - box.cy
    bx = dx * c + dy * s
    by = -dx * s + dy * c
    return abs(bx) <= box.l / 2.0 and abs(by) <= box.w / 2.0


# ---------------------------------------------------------------------------
# label file IO: labels/<frame:06d>.jsonl

def _box_record(bl: BoxLabel, split: str) -> dict:
    rec = {
        "type": "box",
        "class": bl.class_id,
        "track_id": bl.track_id,
        "box": [bl.box.cx, bl.box.cy, bl.box.cz, bl.box.l, bl.box.w,
                bl.box.h, bl.box.yaw],
        "split": split,
        "velocity": (None if bl.velocity is None
                     else [float(v) for v in bl.velocity]),
        "spr": bl.spr,
    }
    return rec


def write_labels(out_dir, label_sets: dict) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for frame_id in sorted(label_sets):
        ls = label_sets[frame_id]
        with open(root / f"{frame_id:06d}.jsonl", "w") as fh:
            for bl in ls.gt_supervision:
                fh.write(json.dumps(_box_record(bl, "gt"), sort_keys=True) + "\n")
            for bl in ls.pseudo_boxes:
                fh.write(json.dumps(_box_record(bl, "pseudo"), sort_keys=True) + "\n")
            for pl in ls.pseudo_points:
                fh.write(json.dumps({
                    "type": "point",
                    "class": pl.class_id,
                    "track_id": pl.track_id,
                    "point": [float(v) for v in pl.position],
                    "split": "pseudo",
                    "velocity": None,
                    "spr": None,
                }, sort_keys=True) + "\n")


def read_labels(label_dir) -> dict:
    root = Path(label_dir)
    out = {}
    for path in sorted(root.glob("*.jsonl")):
        frame_id = int(path.stem)
        ls = LabelSet()
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["type"] == "box":
                bl = BoxLabel(
                    box=Box3D(*rec["box"]),
                    class_id=int(rec["class"]),
                    track_id=int(rec["track_id"]),
                    frame_id=frame_id,
                    velocity=(None if rec.get("velocity") is None
                              else np.asarray(rec["velocity"])),
                    spr=rec.get("spr"),
                )
                if rec["split"] == "gt":
                    ls.gt_supervision.append(bl)
                else:
                    ls.pseudo_boxes.append(bl)
            else:
                ls.pseudo_points.append(PointLabel(
                    position=np.asarray(rec["point"]),
                    class_id=int(rec["class"]),
                    track_id=int(rec["track_id"]),
                    frame_id=frame_id,
                    n_points=0,
                ))
        out[frame_id] = ls
    return out
