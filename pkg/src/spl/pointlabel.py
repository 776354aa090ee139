"""Per-object 3D point extraction and 3D point pseudo labels.

The per-frame flow is: associate points to a 2D mask, gate by depth from
pixel height, keep the best DBSCAN subcluster, grow it back over missed
points, then resolve multi-object ownership by KNN voting.  The centroid of
the surviving set is the point pseudo label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyObject, InvalidPixelHeight, NoValidCluster
from .geom import CameraModel, PointCloud, project_points
from .ingest import Detection2D, dilate_mask

NOISE = -1


@dataclass
class ObjectPoints:
    track_id: int
    class_id: int
    frame_id: int
    point_indices: np.ndarray  # indices into the frame's nonground cloud
    centroid: np.ndarray

    @classmethod
    def from_indices(cls, track_id, class_id, frame_id, indices, xyz):
        indices = np.asarray(sorted(set(int(i) for i in indices)), dtype=int)
        if len(indices) == 0:
            raise EmptyObject(f"track {track_id}: no points")
        return cls(track_id, class_id, frame_id, indices,
                   xyz[indices].mean(axis=0))


@dataclass
class PointLabel:
    position: np.ndarray
    class_id: int
    track_id: int
    frame_id: int
    n_points: int


def associate_points(nonground: PointCloud, cam: CameraModel,
                     det: Detection2D, dilate_px: int = 2) -> np.ndarray:
    """Indices of points projecting into the detection mask dilated by a
    square element of radius ``dilate_px``.  Behind-camera points never match."""
    mask = dilate_mask(det.mask, dilate_px)
    proj = project_points(nonground, cam)
    ok = proj[:, 3] > 0.5
    out = np.zeros(len(nonground), dtype=bool)
    if ok.any():
        u = np.floor(proj[ok, 0]).astype(int)
        v = np.floor(proj[ok, 1]).astype(int)
        out[np.flatnonzero(ok)] = mask[v, u]
    return np.flatnonzero(out)


def camera_depths(nonground: PointCloud, cam: CameraModel) -> np.ndarray:
    return cam.lidar_to_cam.apply(nonground.xyz)[:, 2]


def depth_filter(depths: np.ndarray, h_min: float, h_max: float,
                 pixel_height: float, fy: float) -> np.ndarray:
    """Boolean keep-mask for depths inside the class height gate.

    The admissible depth interval is closed at both ends:
    [fy * h_min / pixel_height, fy * h_max / pixel_height].
    """
    if pixel_height <= 0:
        raise InvalidPixelHeight(f"pixel height {pixel_height} must be > 0")
    if fy <= 0:
        raise InvalidPixelHeight(f"fy {fy} must be > 0")
    d_min = fy * h_min / pixel_height
    d_max = fy * h_max / pixel_height
    depths = np.asarray(depths, dtype=np.float64)
    return (depths >= d_min) & (depths <= d_max)


def dbscan(xyz: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Euclidean 3D DBSCAN; returns labels with noise marked -1.

    A point's eps-neighborhood includes the point itself.  Clusters are
    numbered in order of discovery, scanning points by index.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_samples < 1:
        raise ValueError("min_samples must be >= 1")
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels

    tree = cKDTree(xyz)
    neighborhoods = tree.query_ball_point(xyz, eps)
    core = np.array([len(nb) >= min_samples for nb in neighborhoods])

    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        # BFS expansion from a fresh core point
        visited[i] = True
        labels[i] = cluster
        queue = list(neighborhoods[i])
        qi = 0
        while qi < len(queue):
            j = queue[qi]
            qi += 1
            if labels[j] == NOISE:
                labels[j] = cluster
            if not visited[j]:
                visited[j] = True
                if core[j]:
                    queue.extend(neighborhoods[j])
        cluster += 1
    return labels


def select_subcluster(labels: np.ndarray, in_mask: np.ndarray) -> int:
    """Pick the subcluster maximizing mask fraction + relative size.

    score(k) = (in-mask fraction of cluster k) + |cluster k| / max_j |cluster j|.
    Ties prefer the larger cluster, then the lower label.
    """
    labels = np.asarray(labels)
    in_mask = np.asarray(in_mask, dtype=bool)
    ids = sorted(set(labels.tolist()) - {NOISE})
    if not ids:
        raise NoValidCluster("all points are noise")
    sizes = {k: int(np.count_nonzero(labels == k)) for k in ids}
    max_size = max(sizes.values())
    best = None
    for k in ids:
        members = labels == k
        frac = float(np.count_nonzero(in_mask & members)) / sizes[k]
        score = frac + sizes[k] / max_size
        key = (score, sizes[k], -k)
        if best is None or key > best[0]:
            best = (key, k)
    return best[1]


def recover_missing(seed_indices: np.ndarray, xyz: np.ndarray,
                    r1: float, r2: float) -> np.ndarray:
    """Grow the seed set over nearby points.

    Repeatedly absorbs any point within r1 of the current set, as long as it
    stays within r2 of the *initial* seed centroid.  Terminates because the
    candidate pool inside the r2 ball is finite and growth is monotone.
    """
    if r1 >= r2:
        raise ValueError("r1 must be below r2")
    seed_indices = np.asarray(seed_indices, dtype=int)
    if len(seed_indices) == 0:
        raise EmptyObject("empty seed set")
    centroid = xyz[seed_indices].mean(axis=0)

    tree = cKDTree(xyz)
    pool = np.asarray(tree.query_ball_point(centroid, r2), dtype=int)
    member = np.zeros(len(xyz), dtype=bool)
    member[seed_indices] = True
    frontier = seed_indices
    while True:
        candidates = pool[~member[pool]]
        if len(candidates) == 0:
            break
        dist = np.min(
            np.linalg.norm(xyz[candidates][:, None, :] - xyz[frontier][None, :, :],
                           axis=2),
            axis=1,
        )
        new = candidates[dist <= r1]
        if len(new) == 0:
            break
        member[new] = True
        frontier = new
    return np.flatnonzero(member)


def resolve_conflicts(claims: dict, xyz: np.ndarray, k: int = 5) -> dict:
    """Assign multiply-claimed points by majority vote of their k nearest
    uniquely-claimed neighbors.

    ``claims`` maps an object key to an index array; the result maps the same
    keys to pairwise-disjoint index arrays.  Ties fall to the label of the
    nearest unique neighbor; with no unique neighbors at all, the first
    claimant (in ``claims`` order) keeps the point.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    keys = list(claims)
    claim_lists = {}
    for key in keys:
        for idx in np.asarray(claims[key], dtype=int):
            claim_lists.setdefault(int(idx), []).append(key)

    unique_idx = [i for i, owners in claim_lists.items() if len(owners) == 1]
    unique_owner = {i: claim_lists[i][0] for i in unique_idx}
    contested = [i for i, owners in claim_lists.items() if len(owners) > 1]

    resolved = {key: set(np.asarray(claims[key], dtype=int).tolist())
                for key in keys}
    for i in contested:
        owners = claim_lists[i]
        if unique_idx:
            uniq = np.asarray(unique_idx, dtype=int)
            dist = np.linalg.norm(xyz[uniq] - xyz[i], axis=1)
            order = np.argsort(dist, kind="stable")[:k]
            votes = {}
            for j in order:
                label = unique_owner[int(uniq[j])]
                votes[label] = votes.get(label, 0) + 1
            top = max(votes.values())
            winners = [lbl for lbl, c in votes.items() if c == top]
            if len(winners) == 1:
                winner = winners[0]
            else:
                winner = unique_owner[int(uniq[order[0]])]
        else:
            winner = owners[0]
        for key in owners:
            if key != winner:
                resolved[key].discard(i)
    return {key: np.asarray(sorted(resolved[key]), dtype=int) for key in keys}


def make_point_label(obj: ObjectPoints) -> PointLabel:
    if len(obj.point_indices) == 0:
        raise EmptyObject(f"track {obj.track_id}: empty object")
    return PointLabel(
        position=np.asarray(obj.centroid, dtype=np.float64).copy(),
        class_id=obj.class_id,
        track_id=obj.track_id,
        frame_id=obj.frame_id,
        n_points=int(len(obj.point_indices)),
    )
