"""BEV heatmap targets and prototype-guided feature mining.

Builds the GT and pseudo heatmaps, scores projected features against the
prototype bank, fuses similarity with pseudo priors into a mined heatmap and
an ambiguity mask, and collects foreground/background feature sets for the
contrastive losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch

EPS_G = 1e-4  # "zero heatmap" reading: Gaussian tails below this count as zero


@dataclass
class BevGridSpec:
    x_min: float = -50.0
    x_max: float = 50.0
    y_min: float = -50.0
    y_max: float = 50.0
    cell: float = 0.5

    @property
    def width(self) -> int:
        return int(math.ceil((self.x_max - self.x_min) / self.cell))

    @property
    def height(self) -> int:
        return int(math.ceil((self.y_max - self.y_min) / self.cell))

    def cell_of(self, x: float, y: float):
        """(row, col) of a metric position, or None when out of range."""
        ix = int(math.floor((x - self.x_min) / self.cell))
        iy = int(math.floor((y - self.y_min) / self.cell))
        if 0 <= ix < self.width and 0 <= iy < self.height:
            return iy, ix
        return None


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W, C) in [0, 1]
    grid: BevGridSpec
    class_id: np.ndarray = None  # (H, W) argmax class, -1 where empty

    def __post_init__(self):
        if self.class_id is None:
            peak = self.values.max(axis=2)
            self.class_id = np.where(
                peak > 0.0, self.values.argmax(axis=2), -1
            )


@dataclass
class FeatureMap:
    values: np.ndarray  # (H, W, D)
    normalized: bool = False


@dataclass
class MinedSignals:
    similarity: np.ndarray          # S' (H, W)
    class_id: np.ndarray            # C_id^s (H, W)
    proto_id: np.ndarray            # K_id^s (H, W)
    score_map: np.ndarray           # H_s (H, W)
    mined: np.ndarray               # H_m (H, W) scalar form
    mask: np.ndarray                # H_mask (H, W) binary
    target: np.ndarray              # H_up (H, W, C)
    foreground: list = field(default_factory=list)  # (vec, c, k, origin)
    background: np.ndarray = None   # F_bg (B, D)


def gaussian_radius(l_cells: float, w_cells: float,
                    min_overlap: float = 0.7) -> float:
    """CenterPoint's minimum-overlap radius rule for a BEV footprint."""
    height, width = w_cells, l_cells

    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(max(b1 ** 2 - 4 * a1 * c1, 0.0))) / 2.0

    a2 = 4.0
    b2 = 2.0 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(max(b2 ** 2 - 4 * a2 * c2, 0.0))) / (2.0 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(max(b3 ** 2 - 4 * a3 * c3, 0.0))) / (2.0 * a3)
    return min(r1, r2, r3)


def draw_gaussian(channel: np.ndarray, iy: int, ix: int, radius: int) -> None:
    """Max-merge a unit-peak Gaussian splat into a single-channel map."""
    h, w = channel.shape
    sigma = (2 * radius + 1) / 6.0
    ys = np.arange(-radius, radius + 1)
    xs = np.arange(-radius, radius + 1)
    g = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma ** 2))

    y0, y1 = max(0, iy - radius), min(h, iy + radius + 1)
    x0, x1 = max(0, ix - radius), min(w, ix + radius + 1)
    gy0 = y0 - (iy - radius)
    gx0 = x0 - (ix - radius)
    view = channel[y0:y1, x0:x1]
    np.maximum(view, g[gy0:gy0 + (y1 - y0), gx0:gx0 + (x1 - x0)], out=view)


def gaussian_heatmap(box_labels: list, point_labels: list, grid: BevGridSpec,
                     min_sizes: dict, num_classes: int = 3,
                     radius_floor: int = 2) -> Heatmap:
    """Per-class Gaussian center heatmap from box and point labels.

    Point labels borrow the minimum size of their class for the radius rule;
    objects outside the grid range are skipped.  Overlapping splats of the
    same class merge by per-cell maximum.
    """
    values = np.zeros((grid.height, grid.width, num_classes))
    entries = []
    for bl in box_labels:
        entries.append((bl.class_id, bl.box.cx, bl.box.cy, bl.box.l, bl.box.w))
    for pl in point_labels:
        l, w, _ = min_sizes[pl.class_id]
        entries.append((pl.class_id, float(pl.position[0]),
                        float(pl.position[1]), l, w))
    for class_id, x, y, l, w in entries:
        cell = grid.cell_of(x, y)
        if cell is None:
            continue
        radius = max(radius_floor,
                     int(gaussian_radius(l / grid.cell, w / grid.cell)))
        draw_gaussian(values[:, :, class_id], cell[0], cell[1], radius)
    return Heatmap(values, grid)


def project_features(raw: FeatureMap, head) -> FeatureMap:
    """Per-cell affine map (1x1 convolution) followed by L2 normalization."""
    x = raw.values
    if x.shape[-1] != head.weight.shape[0]:
        raise DimMismatch(
            f"feature dim {x.shape[-1]} vs head input {head.weight.shape[0]}"
        )
    y = x @ head.weight + head.bias
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    out = np.where(norm > 0.0, y / np.where(norm > 0.0, norm, 1.0), 0.0)
    return FeatureMap(out, normalized=True)


def similarity_map(fp: FeatureMap, prototypes: np.ndarray):
    """Cosine similarity of each cell against every prototype, max-reduced.

    Returns (S', C_id, K_id); argmax ties break to the lowest class, then the
    lowest prototype index.
    """
    P = np.asarray(prototypes)
    C, K, D = P.shape
    sim = np.einsum("hwd,ckd->hwck", fp.values, P)
    flat = sim.reshape(sim.shape[0], sim.shape[1], C * K)
    idx = flat.argmax(axis=2)
    s_max = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    return s_max, idx // K, idx % K


def similarity_score_map(s_max: np.ndarray, hg_values: np.ndarray,
                         tau_s: float, eps_g: float = EPS_G) -> np.ndarray:
    """Threshold the similarity map and blank GT-occupied cells."""
    gt_free = hg_values.max(axis=2) < eps_g
    return np.where((s_max > tau_s) & gt_free, s_max, 0.0)


def fuse(h_s: np.ndarray, class_s: np.ndarray, hp: Heatmap, hg: Heatmap,
         eps_g: float = EPS_G):
    """Fuse the similarity score map with the pseudo heatmap.

    A cell is mined (H_m) when the pseudo prior and the similarity score are
    both positive and agree on the class; cells where exactly one signal
    fires are masked out (H_mask = 0).  The classification target is
    H_up = H_g + H_m, with H_m placed into its mined class channel.
    """
    hp_pos = hp.values.max(axis=2) > 0.0
    hs_pos = h_s > 0.0
    agree = class_s == hp.class_id
    h_m = np.where(hp_pos & hs_pos & agree, h_s, 0.0)
    h_mask = np.where((hp_pos | hs_pos) & (h_m == 0.0), 0.0, 1.0)

    num_classes = hg.values.shape[2]
    mined_channels = np.zeros_like(hg.values)
    my, mx = np.nonzero(h_m > 0.0)
    mined_channels[my, mx, class_s[my, mx]] = h_m[my, mx]
    h_up = np.minimum(hg.values + mined_channels, 1.0)
    return h_m, h_mask, h_up


def extract_foreground(fp: FeatureMap, gt_cells: list, h_m: np.ndarray,
                       class_s: np.ndarray, proto_s: np.ndarray,
                       prototypes: np.ndarray) -> list:
    """Foreground feature set: GT center cells first, then every mined cell.

    ``gt_cells`` holds (class_id, row, col) per GT object; GT features take
    the most similar prototype of their own class, mined features take the
    argmax ids recorded during mining.  Returns (vector, class, proto, origin)
    tuples with origin in {"gt", "mined"}.
    """
    out = []
    P = np.asarray(prototypes)
    for class_id, iy, ix in gt_cells:
        vec = fp.values[iy, ix]
        k = int(np.argmax(vec @ P[class_id].T))
        out.append((vec.copy(), int(class_id), k, "gt"))
    my, mx = np.nonzero(h_m > 0.0)
    for iy, ix in zip(my.tolist(), mx.tolist()):
        out.append((fp.values[iy, ix].copy(), int(class_s[iy, ix]),
                    int(proto_s[iy, ix]), "mined"))
    return out


def sample_background(fp: FeatureMap, hg_values: np.ndarray,
                      hp_values: np.ndarray, h_s: np.ndarray, count: int,
                      rng: np.random.Generator, eps_g: float = EPS_G,
                      return_cells: bool = False):
    """Uniform sample (without replacement) of cells clear of all signals.

    With ``return_cells`` the sampled (row, col) pairs come back too, so the
    caller can scatter background gradients into the feature map.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    clear = (
        (hg_values.max(axis=2) < eps_g)
        & (hp_values.max(axis=2) < eps_g)
        & (h_s < eps_g)
    )
    ys, xs = np.nonzero(clear)
    n = len(ys)
    if n == 0 or count == 0:
        feats = np.zeros((0, fp.values.shape[2]))
        return (feats, []) if return_cells else feats
    if n <= count:
        picked = np.arange(n)
    else:
        picked = np.sort(rng.choice(n, size=count, replace=False))
    feats = fp.values[ys[picked], xs[picked]].copy()
    if return_cells:
        cells = list(zip(ys[picked].tolist(), xs[picked].tolist()))
        return feats, cells
    return feats
