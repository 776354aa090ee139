"""End-to-end orchestration: label generation, evaluation, staged training.

The desk-scale trainer exercises the full signal/loss machinery on synthetic
BEV features: the trainable parts are the projection head and a per-cell
linear classification head; no detection backbone is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .boxlabel import (
    BoxLabel,
    LabelSet,
    TrackEntry,
    TrackHistory,
    canonicalize_box,
    fit_lshape,
    ground_snap,
    refine_temporal,
    size_filter,
    split_labels,
    spr,
    track_velocity,
)
from .errors import FrameMismatch, GroundFitFailed, TooFewPoints
from .geom import Box3D, box_bev_corners, iou_bev
from .ingest import aggregate_frames, remove_ground
from .pointlabel import (
    ObjectPoints,
    PointLabel,
    associate_points,
    camera_depths,
    dbscan,
    depth_filter,
    make_point_label,
    recover_missing,
    resolve_conflicts,
    select_subcluster,
)
from .proto import (
    MemoryBank,
    ProjectionHead,
    PrototypeBank,
    focal_cls_loss,
    head_backward,
    inter_loss,
    intra_loss,
    kmeans_init,
    memory_loss,
    update_prototypes,
)
from .signals import (
    BevGridSpec,
    FeatureMap,
    Heatmap,
    fuse,
    gaussian_heatmap,
    project_features,
    sample_background,
    similarity_map,
    similarity_score_map,
)


def grid_from_config(cfg: dict) -> BevGridSpec:
    g = cfg["grid"]
    return BevGridSpec(g["x_min"], g["x_max"], g["y_min"], g["y_max"],
                       g["cell"])

VEHICLE, PEDESTRIAN, CYCLIST = 0, 1, 2


# ---------------------------------------------------------------------------
# label generation

def _object_points_for_frame(nonground, ground, bundle, class_geo, lab_cfg):
    """Mask association, depth gate, subcluster selection, recovery, and
    conflict resolution for one frame; returns {(track, class): indices}."""
    xyz = nonground.xyz
    cam = bundle.camera
    depths = camera_depths(nonground, cam)
    dilate_px = int(lab_cfg["dilate_px"])
    refine = bool(lab_cfg["refine_points"])

    claims = {}
    for det in bundle.detections:
        geo = class_geo[det.class_id]
        cand = associate_points(nonground, cam, det, dilate_px=dilate_px)
        if len(cand) == 0:
            continue
        keep = depth_filter(depths[cand], geo.h_min, geo.h_max,
                            det.pixel_height, cam.fy)
        cand = cand[keep]
        if len(cand) == 0:
            continue

        if refine:
            labels = dbscan(xyz[cand], geo.dbscan_eps, geo.dbscan_min_samples)
            if (labels >= 0).any():
                raw_mask = associate_points(nonground, cam, det, dilate_px=0)
                in_mask = np.isin(cand, raw_mask)
                chosen = select_subcluster(labels, in_mask)
                seed = cand[labels == chosen]
                cand = recover_missing(seed, xyz, geo.r1, geo.r2)
            # all-noise detections keep the depth-gated candidates
        claims[(det.track_id, det.class_id)] = cand

    if refine and claims:
        knn_k = int(lab_cfg["knn_k"])
        claims = resolve_conflicts(claims, xyz, k=knn_k)
    return {key: idx for key, idx in claims.items() if len(idx) > 0}


def _anchor_with_dims(pts: np.ndarray, yaw: float, dims) -> Box3D:
    """Box with fixed dims anchored at the observed near faces.

    The sensor sits at the origin; along each box axis the side facing the
    sensor stays where the points put it and the far side extends away to
    reach the requested dimension.
    """
    l, w, h = dims
    c, s = math.cos(yaw), math.sin(yaw)
    bx = pts[:, 0] * c + pts[:, 1] * s
    by = -pts[:, 0] * s + pts[:, 1] * c

    def interval(vals, size):
        lo, hi = float(vals.min()), float(vals.max())
        if lo > 0:
            return lo, lo + size
        if hi < 0:
            return hi - size, hi
        mid = (lo + hi) / 2.0
        return mid - size / 2.0, mid + size / 2.0

    x0, x1 = interval(bx, l)
    y0, y1 = interval(by, w)
    mx, my = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    cx = mx * c - my * s
    cy = mx * s + my * c
    z_lo = float(pts[:, 2].min())
    from .geom import wrap_angle

    return Box3D(cx, cy, z_lo + h / 2.0, l, w, h, wrap_angle(yaw))


def _fallback_box(pts: np.ndarray, fitted_yaw: float, geo,
                  yaw_hint: float | None = None) -> Box3D:
    """Average-dims box when the tight fit fails the size gate.

    Partial views collapse the tight rectangle onto the visible face, so the
    face orientation is trusted but the dims are replaced with the class
    average.  Of the two axis hypotheses (face = side vs face = front/rear),
    pick the one whose cross-axis span best matches the average width; a
    velocity-derived ``yaw_hint`` overrides the hypothesis search.
    """
    l_avg, w_avg, h_avg = geo.avg_size
    if yaw_hint is not None:
        return _anchor_with_dims(pts, yaw_hint, (l_avg, w_avg, h_avg))
    best = None
    for psi in (fitted_yaw, fitted_yaw + math.pi / 2.0):
        c, s = math.cos(psi), math.sin(psi)
        bx = pts[:, 0] * c + pts[:, 1] * s
        by = -pts[:, 0] * s + pts[:, 1] * c
        s_long = float(bx.max() - bx.min())
        s_perp = float(by.max() - by.min())
        score = abs(s_perp - w_avg) + 0.25 * max(0.0, s_long - l_avg)
        if s_long > geo.max_size[0] * 1.2 or s_perp > geo.max_size[1] * 1.2:
            score += 100.0
        if best is None or score < best[0]:
            best = (score, psi)
    return _anchor_with_dims(pts, best[1], (l_avg, w_avg, h_avg))


def generate_labels(frames: list, cfg: dict | None = None,
                    human_boxes: list | None = None,
                    rng: np.random.Generator | None = None) -> dict:
    """Run the full per-frame labeling pipeline over a loaded sequence.

    Returns {frame_id: LabelSet}.  Deterministic for fixed inputs/config.
    In sparse mode ``human_boxes`` (BoxLabels) become the GT supervision.
    """
    cfg = cfg or cfgmod.default_config()
    lab = cfg["labeling"]
    class_geo = cfgmod.class_geometry_from_config(cfg)
    rng = rng if rng is not None else np.random.default_rng(0)
    window = int(lab["aggregation_window"])

    point_labels = []
    points_by_track = {}
    velocity_positions = {}
    detection_rects = {}
    timestamps = {}
    grounds = {}

    for idx, bundle in enumerate(frames):
        timestamps[bundle.frame_id] = bundle.timestamp
        for det in bundle.detections:
            detection_rects[(bundle.frame_id, det.track_id)] = det.rect

        cloud, tags = aggregate_frames(frames, idx, window, return_tags=True)
        try:
            nonground, ground = remove_ground(
                cloud, cfg["ground"],
                rng=np.random.default_rng(bundle.frame_id),
            )
        except (ValueError, GroundFitFailed):
            continue
        # recover the ground-removal keep mask to carry the frame tags over
        dist = np.abs(cloud.xyz @ ground.plane[:3] + ground.plane[3])
        tags = tags[dist > float(cfg["ground"]["inlier_distance"])]
        grounds[bundle.frame_id] = ground
        objects = _object_points_for_frame(nonground, ground, bundle,
                                           class_geo, lab)

        xyz = nonground.xyz
        for (track_id, class_id), indices in sorted(objects.items()):
            obj = ObjectPoints.from_indices(track_id, class_id,
                                            bundle.frame_id, indices, xyz)
            point_labels.append(make_point_label(obj))
            # keep only the center frame's own points per object, so box
            # fitting can later motion-compensate across frames
            center_idx_pts = obj.point_indices[
                tags[obj.point_indices] == bundle.frame_id
            ]
            points_by_track.setdefault((track_id, class_id), {})[
                bundle.frame_id] = xyz[center_idx_pts]
            # velocity estimation needs centroids free of the asymmetric
            # aggregation-window bias, so it uses single-frame points
            pos = (xyz[center_idx_pts].mean(axis=0)
                   if len(center_idx_pts) else obj.centroid)
            velocity_positions.setdefault((track_id, class_id), {})[
                bundle.frame_id] = pos

    # per-track velocities from single-frame centroids
    tracks = {}
    for pl in point_labels:
        tracks.setdefault((pl.track_id, pl.class_id), {})[pl.frame_id] = pl
    track_velocities = {}
    for key in sorted(tracks):
        history = TrackHistory(key[0], key[1])
        for frame_id in sorted(tracks[key]):
            shadow = PointLabel(
                position=np.asarray(velocity_positions[key][frame_id]),
                class_id=key[1], track_id=key[0], frame_id=frame_id,
                n_points=tracks[key][frame_id].n_points,
            )
            history.add(TrackEntry(timestamps[frame_id], frame_id, shadow))
        if len(history.entries) >= 2:
            track_velocities[key] = track_velocity(history)
        else:
            track_velocities[key] = {}

    # box fitting on motion-compensated multi-frame point pools
    box_labels = {}
    pools_by_track = {}
    for key in sorted(tracks):
        track_id, class_id = key
        geo = class_geo[class_id]
        per_frame_pts = points_by_track.get(key, {})
        velocities = track_velocities[key]
        frame_ids = sorted(tracks[key])
        for i, frame_id in enumerate(frame_ids):
            v = np.zeros(3)
            if frame_id in velocities:
                v = np.asarray(velocities[frame_id], dtype=np.float64)
                v = np.array([v[0], v[1], 0.0])
            t_i = timestamps[frame_id]
            chunks = []
            for j in range(max(0, i - window),
                           min(len(frame_ids), i + window + 1)):
                fj = frame_ids[j]
                pts = per_frame_pts.get(fj)
                if pts is None or len(pts) == 0:
                    continue
                chunks.append(pts + v * (t_i - timestamps[fj]))
            if not chunks:
                continue
            pool = np.concatenate(chunks, axis=0)
            pools_by_track.setdefault(key, {})[frame_id] = pool
            if len(pool) < geo.min_points_for_box:
                continue
            try:
                box = fit_lshape(pool, geo.min_points_for_box)
            except TooFewPoints:
                continue
            ground = grounds[frame_id]
            box = canonicalize_box(box)
            if not size_filter(box, geo, lab["size_filter_low"],
                               lab["size_filter_high"]):
                # re-anchoring with average dims is part of box refinement;
                # without it a failed tight fit simply yields no box
                if not lab["refine_boxes"]:
                    continue
                speed = float(np.linalg.norm(v[:2]))
                hint = (math.atan2(v[1], v[0])
                        if speed > lab["v_still"] else None)
                box = _fallback_box(pool, box.yaw, geo, yaw_hint=hint)
                box = canonicalize_box(box)
                if not size_filter(box, geo, lab["size_filter_low"],
                                   lab["size_filter_high"]):
                    continue
            # extend down to the ground, keeping the top face, then snap
            g = ground.height_at(box.cx, box.cy)
            top = box.cz + box.h / 2.0
            if top > g:
                box = Box3D(box.cx, box.cy, box.cz, box.l, box.w,
                            max(top - g, 1e-3), box.yaw)
            box = ground_snap(box, ground)
            ratio = None
            if class_id == VEHICLE:
                ratio = spr(box, pool, d_surf=lab["spr_distance"])
                if ratio < lab["spr_threshold"]:
                    continue
            box_labels[(track_id, class_id, frame_id)] = BoxLabel(
                box, class_id, track_id, frame_id, spr=ratio)

    # temporal refinement per track
    track_speeds = {}
    refined_boxes = []
    suppressed_tracks = set()
    for key in sorted(tracks):
        track_id, class_id = key
        history = TrackHistory(track_id, class_id)
        for frame_id in sorted(tracks[key]):
            history.add(TrackEntry(
                timestamps[frame_id], frame_id, tracks[key][frame_id],
                box_labels.get((track_id, class_id, frame_id)),
            ))
        velocities = track_velocities[key]
        speeds = [float(np.linalg.norm(np.asarray(velocities[e.frame_id])[:2]))
                  if e.frame_id in velocities else 0.0
                  for e in history.entries]
        track_speeds[track_id] = speeds
        if lab["refine_boxes"] and velocities:
            history = refine_temporal(
                history, velocities, v_still=lab["v_still"],
                points_by_frame=pools_by_track.get(key, {}),
            )
            # a cyclist track that never moves is a parked bicycle: the
            # stationary-cyclist rule drops the whole track, points included
            if class_id == CYCLIST and speeds and max(speeds) <= lab["v_still"]:
                suppressed_tracks.add(key)
        for e in history.entries:
            if e.box_label is not None:
                refined_boxes.append(e.box_label)

    # point labels supplement boxes: objects with a surviving box in a frame
    # do not also emit a point label there
    boxed = {(bl.track_id, bl.class_id, bl.frame_id) for bl in refined_boxes}
    point_labels = [pl for pl in point_labels
                    if (pl.track_id, pl.class_id, pl.frame_id) not in boxed
                    and (pl.track_id, pl.class_id) not in suppressed_tracks]
    if not lab["use_point_labels"]:
        point_labels = []

    cam = frames[0].camera if frames else None
    label_sets = split_labels(
        refined_boxes, point_labels, track_speeds, detection_rects, cam,
        iou_thr=lab["alignment_iou"], v_dyn=lab["v_dyn"],
        mode=lab.get("mode", "unsupervised"), human_boxes=human_boxes,
        gt_overlap_iou=lab["gt_overlap_iou"],
    )
    for bundle in frames:
        label_sets.setdefault(bundle.frame_id, LabelSet())
    return label_sets


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    per_class: dict
    iou_thresholds: dict
    point_match_distance: float

    def as_dict(self) -> dict:
        out = {"classes": {}, "point_match_distance": self.point_match_distance}
        for cid, stats in sorted(self.per_class.items()):
            out["classes"][cfgmod.CLASS_NAMES[cid]] = {
                "precision": stats["precision"],
                "recall": stats["recall"],
                "tp": stats["tp"], "fp": stats["fp"], "fn": stats["fn"],
                "iou_threshold": self.iou_thresholds[cid],
            }
        return out

    def macro(self) -> tuple:
        ps = [s["precision"] for s in self.per_class.values()]
        rs = [s["recall"] for s in self.per_class.values()]
        return float(np.mean(ps)), float(np.mean(rs))


def _greedy_box_match(pred_boxes, gt_boxes, thr):
    """Greedy one-to-one matching by descending BEV IoU; returns the sets of
    matched prediction and GT indices."""
    pairs = []
    for i, pb in enumerate(pred_boxes):
        for j, gb in enumerate(gt_boxes):
            iou = iou_bev(pb, gb)
            if iou >= thr:
                pairs.append((iou, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g = set(), set()
    for iou, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
    return used_p, used_g


def eval_labels(pred: dict, gt: dict, iou_thresholds: dict,
                point_match_distance: float = 1.0) -> EvalReport:
    """Precision/recall of predicted labels against ground truth boxes.

    Boxes match greedily at BEV IoU >= threshold; point labels then match
    remaining GT objects by BEV center distance.  Unmatched predictions are
    false positives, unmatched GT false negatives.
    """
    if set(pred) - set(gt):
        raise FrameMismatch(
            f"prediction frames {sorted(set(pred) - set(gt))} missing from gt"
        )
    stats = {c: {"tp": 0, "fp": 0, "fn": 0} for c in iou_thresholds}
    for frame_id in sorted(gt):
        ls = pred.get(frame_id, LabelSet())
        for cid, thr in iou_thresholds.items():
            gt_boxes = [r["box"] for r in gt[frame_id]
                        if r["class_id"] == cid]
            pred_boxes = [bl.box for bl in
                          ls.gt_supervision + ls.pseudo_boxes
                          if bl.class_id == cid]
            used_p, used_g = _greedy_box_match(pred_boxes, gt_boxes, thr)

            points = [pl.position for pl in ls.pseudo_points
                      if pl.class_id == cid]
            remaining = [j for j in range(len(gt_boxes)) if j not in used_g]
            cands = []
            for pi, pos in enumerate(points):
                for j in remaining:
                    d = math.hypot(pos[0] - gt_boxes[j].cx,
                                   pos[1] - gt_boxes[j].cy)
                    if d <= point_match_distance:
                        cands.append((d, pi, j))
            cands.sort()
            used_pt, used_g2 = set(), set(used_g)
            for d, pi, j in cands:
                if pi in used_pt or j in used_g2:
                    continue
                used_pt.add(pi)
                used_g2.add(j)

            tp = len(used_p) + len(used_pt)
            fp = (len(pred_boxes) - len(used_p)) + (len(points) - len(used_pt))
            fn = len(gt_boxes) - len(used_g2)
            stats[cid]["tp"] += tp
            stats[cid]["fp"] += fp
            stats[cid]["fn"] += fn

    per_class = {}
    for cid, s in stats.items():
        denom_p = s["tp"] + s["fp"]
        denom_r = s["tp"] + s["fn"]
        per_class[cid] = {
            "tp": s["tp"], "fp": s["fp"], "fn": s["fn"],
            "precision": s["tp"] / denom_p if denom_p else 0.0,
            "recall": s["tp"] / denom_r if denom_r else 0.0,
        }
    return EvalReport(per_class, dict(iou_thresholds), point_match_distance)


# ---------------------------------------------------------------------------
# desk-scale training data

@dataclass
class DeskFrame:
    frame_id: int
    raw: np.ndarray              # (H, W, D_in) synthetic BEV features
    labels: LabelSet
    hg: Heatmap
    hp: Heatmap
    gt_cells: list               # (class_id, row, col) per GT object
    true_objects: list           # (class_id, row, col, labeled: bool)
    object_cells: np.ndarray     # (H, W) bool, true-object BEV footprints


@dataclass
class TrainState:
    head: ProjectionHead
    cls_weight: np.ndarray
    cls_bias: np.ndarray
    bank: PrototypeBank | None
    memory: MemoryBank
    rng: np.random.Generator
    step: int = 0
    total_steps: int = 1
    lr: float = 0.003
    history: list = field(default_factory=list)


def class_feature_directions(d_in: int, num_classes: int = 3,
                             seed: int = 12345,
                             vehicle_cyclist_cos: float = 0.3) -> np.ndarray:
    """Fixed unit directions used as raw class features.

    Vehicle and cyclist directions are deliberately correlated so separating
    them is something the projection head has to learn, not a property the
    raw features hand it for free.
    """
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((d_in, num_classes))
    q, _ = np.linalg.qr(mat)
    dirs = q.T[:num_classes].copy()
    if num_classes >= 3:
        rho = vehicle_cyclist_cos
        dirs[2] = rho * dirs[0] + math.sqrt(1.0 - rho * rho) * dirs[2]
    return dirs


def sparse_split_from_gt(gt: dict, gt_tracks) -> dict:
    """Sparse-supervision split: the chosen tracks become GT boxes, every
    other true object becomes a pseudo box."""
    gt_tracks = set(gt_tracks)
    out = {}
    for frame_id, recs in gt.items():
        ls = LabelSet()
        for rec in recs:
            bl = BoxLabel(rec["box"], rec["class_id"], rec["track_id"],
                          frame_id)
            if rec["track_id"] in gt_tracks:
                ls.gt_supervision.append(bl)
            else:
                ls.pseudo_boxes.append(bl)
        out[frame_id] = ls
    return out


def _footprint_cells(box: Box3D, grid: BevGridSpec) -> np.ndarray:
    """Boolean (H, W) map of cells whose center lies in the BEV rectangle."""
    mask = np.zeros((grid.height, grid.width), dtype=bool)
    corners = box_bev_corners(box)
    xs = grid.x_min + (np.arange(grid.width) + 0.5) * grid.cell
    ys = grid.y_min + (np.arange(grid.height) + 0.5) * grid.cell
    gx, gy = np.meshgrid(xs, ys)
    inside = np.ones(gx.shape, dtype=bool)
    n = len(corners)
    for i in range(n):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % n]
        inside &= (bx - ax) * (gy - ay) - (by - ay) * (gx - ax) >= 0.0
    mask |= inside
    return mask


def build_desk_dataset(gt: dict, label_sets: dict, grid: BevGridSpec,
                       cfg: dict, rng: np.random.Generator) -> list:
    """Synthesize separable BEV features for every true object and package
    per-frame training targets.

    Cells inside a true object's BEV footprint carry that class's feature
    direction plus Gaussian noise; all other cells are pure noise.
    """
    d_in = int(cfg["train"]["raw_feature_dim"])
    sigma = float(cfg["train"]["feature_noise"])
    dirs = class_feature_directions(d_in)
    min_sizes = cfgmod.class_sizes(cfg, "min_size")

    frames = []
    for frame_id in sorted(gt):
        ls = label_sets.get(frame_id, LabelSet())
        raw = sigma * rng.standard_normal((grid.height, grid.width, d_in))
        object_cells = np.zeros((grid.height, grid.width), dtype=bool)
        true_objects = []
        gt_tracks = {bl.track_id for bl in ls.gt_supervision}
        for rec in gt[frame_id]:
            box = rec["box"]
            cell = grid.cell_of(box.cx, box.cy)
            if cell is None:
                continue
            fp = _footprint_cells(box, grid)
            fp[cell[0], cell[1]] = True
            raw[fp] += dirs[rec["class_id"]]
            object_cells |= fp
            true_objects.append((rec["class_id"], cell[0], cell[1],
                                 rec["track_id"] in gt_tracks))

        hg = gaussian_heatmap(ls.gt_supervision, [], grid, min_sizes)
        hp = gaussian_heatmap(ls.pseudo_boxes, ls.pseudo_points, grid,
                              min_sizes)
        gt_cells = []
        for bl in ls.gt_supervision:
            cell = grid.cell_of(bl.box.cx, bl.box.cy)
            if cell is not None:
                gt_cells.append((bl.class_id, cell[0], cell[1]))
        frames.append(DeskFrame(frame_id, raw, ls, hg, hp, gt_cells,
                                true_objects, object_cells))
    return frames


# ---------------------------------------------------------------------------
# staged training

def init_state(cfg: dict, n_frames: int, stages=(1, 2, 3)) -> TrainState:
    tr = cfg["train"]
    rng = np.random.default_rng(int(tr["seed"]))
    d_in = int(tr["raw_feature_dim"])
    d = int(cfg["proto"]["feature_dim"])
    C = cfgmod.NUM_CLASSES
    K = int(cfg["proto"]["num_prototypes"])
    head = ProjectionHead.init(d_in, d, rng)
    cls_weight = 0.01 * rng.standard_normal((C, d))
    cls_bias = np.full(C, -2.0)

    epochs = {1: int(tr["epochs_stage1"]), 2: int(tr["epochs_stage2"]),
              3: int(tr["epochs_stage3"])}
    total = sum(epochs[s] for s in stages) * max(1, n_frames)
    bank = None
    if 1 not in stages:  # ablation: random unit prototypes
        bank = PrototypeBank.random(C, K, d, rng)
    memory = MemoryBank(C, d, capacity=int(cfg["proto"]["memory_capacity"]))
    return TrainState(head=head, cls_weight=cls_weight, cls_bias=cls_bias,
                      bank=bank, memory=memory, rng=rng,
                      total_steps=max(1, total), lr=float(tr["lr"]))


def _lr(state: TrainState) -> float:
    frac = min(1.0, state.step / state.total_steps)
    return state.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _forward(state: TrainState, frame: DeskFrame):
    fp = project_features(FeatureMap(frame.raw), state.head)
    logits = fp.values @ state.cls_weight.T + state.cls_bias
    pred = 1.0 / (1.0 + np.exp(-logits))
    pred = np.clip(pred, 1e-6, 1.0 - 1e-6)
    return fp, pred


def _apply_grads(state: TrainState, frame: DeskFrame, fp, pred, d_pred,
                 d_fp_cells: dict):
    """Backprop through the classification head and projection head, then
    take one gradient-descent step."""
    sig_grad = d_pred * pred * (1.0 - pred)
    d_cls_w = np.einsum("hwc,hwd->cd", sig_grad, fp.values)
    d_cls_b = sig_grad.sum(axis=(0, 1))
    d_fp = sig_grad @ state.cls_weight
    for (iy, ix), g in d_fp_cells.items():
        d_fp[iy, ix] += g

    g_w, g_b, _ = head_backward(frame.raw, state.head, d_fp)
    lr = _lr(state)
    state.head.weight -= lr * g_w
    state.head.bias -= lr * g_b
    state.cls_weight -= lr * d_cls_w
    state.cls_bias -= lr * d_cls_b
    state.step += 1


def _gt_features(fp, frame: DeskFrame):
    feats = [fp.values[iy, ix] for _, iy, ix in frame.gt_cells]
    classes = [c for c, _, _ in frame.gt_cells]
    return feats, classes


def run_stage1(data: list, state: TrainState, cfg: dict) -> TrainState:
    """Memory-contrastive training of the heads on GT cells, then k-means
    prototype initialization from the accumulated memory."""
    loss_cfg = cfg["loss"]
    epochs = int(cfg["train"]["epochs_stage1"])
    K = int(cfg["proto"]["num_prototypes"])
    ones = None
    for _ in range(epochs):
        for frame in data:
            fp, pred = _forward(state, frame)
            if ones is None or ones.shape != frame.hg.values.shape[:2]:
                ones = np.ones(frame.hg.values.shape[:2])
            cls_rep = focal_cls_loss(pred, frame.hg.values, ones,
                                     loss_cfg["focal_alpha"],
                                     loss_cfg["focal_beta"])
            feats, classes = _gt_features(fp, frame)
            d_cells = {}
            value = cls_rep.value
            if feats:
                mem_rep = memory_loss(np.stack(feats), classes, state.memory,
                                      loss_cfg["tau_t"])
                value += mem_rep.value
                for (c, iy, ix), g in zip(frame.gt_cells,
                                          mem_rep.gradients["features"]):
                    d_cells[(iy, ix)] = d_cells.get((iy, ix), 0.0) + g
            _apply_grads(state, frame, fp, pred, cls_rep.gradients["pred"],
                         d_cells)
            if feats:
                fp2, _ = _forward(state, frame)
                new_feats, new_classes = _gt_features(fp2, frame)
                state.memory.push(np.stack(new_feats), new_classes)
            state.history.append(("stage1", value))
    if epochs == 0:
        # degenerate stage: memory may have been prefilled by the caller
        pass
    state.bank = kmeans_init(state.memory, K, state.rng)
    return state


def _contrastive_step(state: TrainState, frame: DeskFrame, cfg: dict,
                      stage3: bool) -> float:
    loss_cfg = cfg["loss"]
    lam1 = loss_cfg["lambda1"]
    lam2 = loss_cfg["lambda2"]
    tau_t = loss_cfg["tau_t"]
    fp, pred = _forward(state, frame)

    if stage3:
        s_max, c_id, k_id = similarity_map(fp, state.bank.P)
        h_s = similarity_score_map(s_max, frame.hg.values, loss_cfg["tau_s"],
                                   loss_cfg["eps_g"])
        h_m, h_mask, h_up = fuse(h_s, c_id, frame.hp, frame.hg,
                                 loss_cfg["eps_g"])
    else:
        h_mask = np.ones(frame.hg.values.shape[:2])
        h_up = frame.hg.values
        h_m = np.zeros(frame.hg.values.shape[:2])
        c_id = k_id = None
        h_s = None

    cls_rep = focal_cls_loss(pred, h_up, h_mask, loss_cfg["focal_alpha"],
                             loss_cfg["focal_beta"])
    d_cells = {}

    # foreground set: GT center cells (+ mined cells in stage 3)
    cells = []
    feats = []
    classes = []
    protos = []
    for c, iy, ix in frame.gt_cells:
        vec = fp.values[iy, ix]
        cells.append((iy, ix))
        feats.append(vec)
        classes.append(c)
        protos.append(int(np.argmax(vec @ state.bank.P[c].T)))
    if stage3:
        my, mx = np.nonzero(h_m > 0.0)
        for iy, ix in zip(my.tolist(), mx.tolist()):
            cells.append((iy, ix))
            feats.append(fp.values[iy, ix])
            classes.append(int(c_id[iy, ix]))
            protos.append(int(k_id[iy, ix]))

    value = cls_rep.value
    if feats:
        feats_arr = np.stack(feats)
        intra_rep = intra_loss(feats_arr, classes, protos, state.bank, tau_t)
        value += lam1 * intra_rep.value
        for cell, g in zip(cells, intra_rep.gradients["features"]):
            d_cells[cell] = d_cells.get(cell, 0.0) + lam1 * g

        use_inter = stage3 or bool(cfg["train"].get("stage2_inter_loss"))
        if use_inter:
            if stage3:
                bg, bg_cells = sample_background(
                    fp, frame.hg.values, frame.hp.values, h_s,
                    state.bank.P.shape[0] * state.bank.P.shape[1],
                    state.rng, loss_cfg["eps_g"], return_cells=True,
                )
            else:
                bg = np.zeros((0, feats_arr.shape[1]))
                bg_cells = []
            inter_rep = inter_loss(feats_arr, classes, protos, bg,
                                   state.bank, tau_t)
            value += lam2 * inter_rep.value
            for cell, g in zip(cells, inter_rep.gradients["features"]):
                d_cells[cell] = d_cells.get(cell, 0.0) + lam2 * g
            for cell, g in zip(bg_cells,
                               inter_rep.gradients["background"]):
                d_cells[cell] = d_cells.get(cell, 0.0) + lam2 * g

    _apply_grads(state, frame, fp, pred, cls_rep.gradients["pred"], d_cells)

    if feats:
        state.bank = update_prototypes(state.bank, np.stack(feats), classes,
                                       protos, loss_cfg["alpha"])
    return value


def run_stage2(data: list, state: TrainState, cfg: dict) -> TrainState:
    """Prototype-based training on GT features only; plain GT heatmap target."""
    for _ in range(int(cfg["train"]["epochs_stage2"])):
        for frame in data:
            value = _contrastive_step(state, frame, cfg, stage3=False)
            state.history.append(("stage2", value))
    return state


def run_stage3(data: list, state: TrainState, cfg: dict) -> TrainState:
    """Full strategy: mining, masked classification, both contrastive losses."""
    for _ in range(int(cfg["train"]["epochs_stage3"])):
        for frame in data:
            value = _contrastive_step(state, frame, cfg, stage3=True)
            state.history.append(("stage3", value))
    return state


def train_pipeline(data: list, cfg: dict, stages=(1, 2, 3)) -> TrainState:
    state = init_state(cfg, len(data), stages)
    if 1 in stages:
        run_stage1(data, state, cfg)
    if 2 in stages:
        run_stage2(data, state, cfg)
    if 3 in stages:
        run_stage3(data, state, cfg)
    return state


def mining_report(data: list, state: TrainState, cfg: dict) -> dict:
    """Mined-cell recall over deliberately unlabeled objects plus the mined
    false-positive cell rate outside true object footprints."""
    loss_cfg = cfg["loss"]
    found = 0
    total = 0
    fp_cells = 0
    bg_cells = 0
    for frame in data:
        fp, _ = _forward(state, frame)
        s_max, c_id, k_id = similarity_map(fp, state.bank.P)
        h_s = similarity_score_map(s_max, frame.hg.values, loss_cfg["tau_s"],
                                   loss_cfg["eps_g"])
        h_m, _, _ = fuse(h_s, c_id, frame.hp, frame.hg, loss_cfg["eps_g"])
        mined = h_m > 0.0
        for class_id, iy, ix, labeled in frame.true_objects:
            if labeled:
                continue
            total += 1
            y0, y1 = max(0, iy - 1), iy + 2
            x0, x1 = max(0, ix - 1), ix + 2
            window = mined[y0:y1, x0:x1]
            agree = c_id[y0:y1, x0:x1] == class_id
            if (window & agree).any():
                found += 1
        outside = ~frame.object_cells
        fp_cells += int(np.count_nonzero(mined & outside))
        bg_cells += int(np.count_nonzero(outside))
    return {
        "mined_recall": found / total if total else 0.0,
        "false_positive_rate": fp_cells / bg_cells if bg_cells else 0.0,
        "unlabeled_objects": total,
    }
