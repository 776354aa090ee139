"""Acceptance gate: ten numbered checks, one printed pass/fail line each.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines as they
complete; without ``-s`` they appear in the captured-output section.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from spl.boxlabel import TrackEntry, TrackHistory, fit_lshape, track_velocity
from spl.cli import main as cli_main
from spl.config import default_config, eval_thresholds
from spl.geom import Box3D, iou_3d
from spl.pipeline import (
    build_desk_dataset,
    eval_labels,
    generate_labels,
    grid_from_config,
    mining_report,
    sparse_split_from_gt,
    train_pipeline,
)
from spl.pointlabel import PointLabel, dbscan
from spl.proto import (
    MemoryBank,
    ProjectionHead,
    PrototypeBank,
    focal_cls_loss,
    head_backward,
    inter_loss,
    intra_loss,
    memory_loss,
    update_prototypes,
)
from spl.signals import (
    BevGridSpec,
    FeatureMap,
    Heatmap,
    fuse,
    project_features,
    similarity_score_map,
)


# one line per criterion; conftest echoes these in the terminal summary so
# they are visible even without -s
RESULT_LINES = []


def _report(num, ok, detail=""):
    line = f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    RESULT_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. heatmap fusion truth table

def test_criterion_01_fusion_truth_table():
    t0 = time.perf_counter()
    grid = BevGridSpec(0.0, 0.5, 0.0, 0.5, 0.5)  # a single cell
    tau_s, eps_g = 0.9, 1e-4
    hp_cls, other_cls = 1, 2
    mismatches = 0
    for hp_on in (False, True):
        for s_high in (False, True):
            for agree in (False, True):
                for hg_above in (False, True):
                    hp_vals = np.zeros((1, 1, 3))
                    if hp_on:
                        hp_vals[0, 0, hp_cls] = 0.8
                    hg_vals = np.zeros((1, 1, 3))
                    hg_vals[0, 0, 0] = 0.5 if hg_above else eps_g / 10.0
                    s_max = np.array([[0.95 if s_high else 0.5]])
                    class_s = np.array([[hp_cls if agree else other_cls]])

                    h_s = similarity_score_map(s_max, hg_vals, tau_s, eps_g)
                    h_m, h_mask, h_up = fuse(h_s, class_s,
                                             Heatmap(hp_vals, grid),
                                             Heatmap(hg_vals, grid), eps_g)

                    # independent scalar rendering of Eqs. 8-9
                    exp_hs = s_max[0, 0] if (s_high and not hg_above) else 0.0
                    mined = hp_on and exp_hs > 0.0 and agree
                    exp_hm = exp_hs if mined else 0.0
                    exp_mask = 0.0 if ((hp_on or exp_hs > 0.0)
                                       and not mined) else 1.0
                    scatter = np.zeros(3)
                    if mined:
                        scatter[class_s[0, 0]] = exp_hm
                    exp_up = np.minimum(hg_vals[0, 0] + scatter, 1.0)

                    if (h_m[0, 0] != exp_hm or h_mask[0, 0] != exp_mask
                            or not np.array_equal(h_up[0, 0], exp_up)):
                        mismatches += 1
    elapsed = time.perf_counter() - t0
    _report(1, mismatches == 0 and elapsed < 1.0,
            f"mismatches={mismatches}, {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# 2. analytic gradients vs central finite differences

_FD_EPS = 1e-4


def _fd(fun, arr, idx):
    orig = arr[idx]
    arr[idx] = orig + _FD_EPS
    hi = fun()
    arr[idx] = orig - _FD_EPS
    lo = fun()
    arr[idx] = orig
    return (hi - lo) / (2.0 * _FD_EPS)


def _rel_err(analytic, fd):
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-3)


def _rand_idx(rng, shape, count):
    flat = rng.choice(int(np.prod(shape)), size=count, replace=False)
    return [tuple(np.unravel_index(i, shape)) for i in flat]


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    D, C, K = 64, 3, 5
    n_cfg = 100
    worst = 0.0
    rng = np.random.default_rng(2025)

    for _ in range(n_cfg):
        bank = PrototypeBank.random(C, K, D, rng)
        cids = rng.integers(0, C, 4)
        kids = rng.integers(0, K, 4)
        feats = rng.standard_normal((4, D))

        rep = intra_loss(feats, cids, kids, bank, 1.0)
        fun = lambda: intra_loss(feats, cids, kids, bank, 1.0).value
        for idx in _rand_idx(rng, feats.shape, 6):
            worst = max(worst, _rel_err(rep.gradients["features"][idx],
                                        _fd(fun, feats, idx)))

        bg = rng.standard_normal((5, D))
        rep = inter_loss(feats, cids, kids, bg, bank, 1.0)
        fun = lambda: inter_loss(feats, cids, kids, bg, bank, 1.0).value
        for idx in _rand_idx(rng, feats.shape, 4):
            worst = max(worst, _rel_err(rep.gradients["features"][idx],
                                        _fd(fun, feats, idx)))
        for idx in _rand_idx(rng, bg.shape, 4):
            worst = max(worst, _rel_err(rep.gradients["background"][idx],
                                        _fd(fun, bg, idx)))

        memory = MemoryBank(C, D, capacity=100)
        ent = rng.standard_normal((3 * 8, D))
        ent /= np.linalg.norm(ent, axis=1, keepdims=True)
        memory.push(ent, np.repeat(np.arange(C), 8))
        mfeats = rng.standard_normal((3, D))
        mcids = rng.integers(0, C, 3)
        rep = memory_loss(mfeats, mcids, memory, 1.0)
        fun = lambda: memory_loss(mfeats, mcids, memory, 1.0).value
        for idx in _rand_idx(rng, mfeats.shape, 6):
            worst = max(worst, _rel_err(rep.gradients["features"][idx],
                                        _fd(fun, mfeats, idx)))

        pred = rng.uniform(0.05, 0.95, (5, 5, C))
        h_up = rng.uniform(0.0, 0.9, (5, 5, C))
        peaks = rng.integers(0, 5, (3, 2))
        h_up[peaks[:, 0], peaks[:, 1], rng.integers(0, C, 3)] = 1.0
        mask = (rng.random((5, 5)) > 0.3).astype(float)
        rep = focal_cls_loss(pred, h_up, mask)
        fun = lambda: focal_cls_loss(pred, h_up, mask).value
        for idx in _rand_idx(rng, pred.shape, 8):
            worst = max(worst, _rel_err(rep.gradients["pred"][idx],
                                        _fd(fun, pred, idx)))

        head = ProjectionHead.init(16, D, rng)
        raw = rng.standard_normal((3, 4, 16))
        upstream = rng.standard_normal((3, 4, D))
        g_w, g_b, g_x = head_backward(raw, head, upstream)

        def head_fun():
            return float(np.sum(upstream
                                * project_features(FeatureMap(raw), head).values))

        for idx in _rand_idx(rng, head.weight.shape, 4):
            worst = max(worst, _rel_err(g_w[idx], _fd(head_fun, head.weight, idx)))
        for idx in _rand_idx(rng, head.bias.shape, 2):
            worst = max(worst, _rel_err(g_b[idx], _fd(head_fun, head.bias, idx)))
        for idx in _rand_idx(rng, raw.shape, 4):
            worst = max(worst, _rel_err(g_x[idx], _fd(head_fun, raw, idx)))

    elapsed = time.perf_counter() - t0
    _report(2, worst < 1e-3 and elapsed < 60.0,
            f"max rel err={worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. prototype invariants

def test_criterion_03_prototype_invariants():
    rng = np.random.default_rng(3)
    bank = PrototypeBank.random(3, 5, 64, rng)
    for _ in range(10_000):
        n = int(rng.integers(1, 6))
        feats = rng.standard_normal((n, 64))
        bank = update_prototypes(bank, feats,
                                 rng.integers(0, 3, n), rng.integers(0, 5, n),
                                 alpha=0.9)
    norm_dev = float(np.abs(np.linalg.norm(bank.P, axis=2) - 1.0).max())

    feats = rng.standard_normal((4, 64))
    full_momentum = update_prototypes(bank, feats, [0, 1, 2, 0], [0, 1, 2, 3],
                                      alpha=1.0)
    alpha_fixed = np.array_equal(full_momentum.P, bank.P)

    c, k = 1, 2
    on_proto = np.tile(bank.P[c, k], (4, 1))
    mean_fixed_bank = update_prototypes(bank, on_proto, [c] * 4, [k] * 4,
                                        alpha=0.9)
    mean_fixed = np.array_equal(mean_fixed_bank.P, bank.P)

    _report(3, norm_dev <= 1e-9 and alpha_fixed and mean_fixed,
            f"max |norm-1|={norm_dev:.1e}, alpha=1 exact: {alpha_fixed}, "
            f"mean=P exact: {mean_fixed}")


# ---------------------------------------------------------------------------
# 4. DBSCAN against an O(n^2) oracle

def _dbscan_oracle(xyz, eps, min_samples):
    n = len(xyz)
    dist = np.linalg.norm(xyz[:, None, :] - xyz[None, :, :], axis=2)
    nbrs = [np.flatnonzero(dist[i] <= eps).tolist() for i in range(n)]
    core = [len(nb) >= min_samples for nb in nbrs]
    labels = [-1] * n
    visited = [False] * n
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = list(nbrs[i])
        qi = 0
        while qi < len(queue):
            j = queue[qi]
            qi += 1
            if labels[j] == -1:
                labels[j] = cluster
            if not visited[j]:
                visited[j] = True
                if core[j]:
                    queue.extend(nbrs[j])
        cluster += 1
    return labels


def _canonical(labels):
    mapping = {}
    out = []
    for lab in labels:
        if lab == -1:
            out.append(-1)
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out.append(mapping[lab])
    return out


def test_criterion_04_dbscan_oracle():
    rng = np.random.default_rng(4)
    matched = 0
    for _ in range(50):
        n_blobs = int(rng.integers(1, 5))
        chunks = []
        for _ in range(n_blobs):
            center = rng.uniform(-5.0, 5.0, 3)
            chunks.append(rng.normal(center, 0.2, (int(rng.integers(5, 60)), 3)))
        chunks.append(rng.uniform(-6.0, 6.0, (int(rng.integers(5, 40)), 3)))
        xyz = np.vstack(chunks)[:300]
        eps = float(rng.uniform(0.3, 0.7))
        min_samples = int(rng.integers(2, 6))
        got = _canonical(dbscan(xyz, eps, min_samples).tolist())
        want = _canonical(_dbscan_oracle(xyz, eps, min_samples))
        if got == want:
            matched += 1
    _report(4, matched == 50, f"{matched}/50 partitions match")


# ---------------------------------------------------------------------------
# 5. L-shape fitting accuracy

def _rect_outline(l, w, cx, cy, yaw, n_edge, sigma, rng):
    # midpoint sampling along each edge: no duplicated corner points
    ts = (np.arange(n_edge) + 0.5) / n_edge - 0.5
    pts = []
    for axis, side in [(0, -1), (0, 1), (1, -1), (1, 1)]:
        if axis == 0:
            xs, ys = ts * l, np.full_like(ts, side * w / 2.0)
        else:
            xs, ys = np.full_like(ts, side * l / 2.0), ts * w
        pts.append(np.column_stack([xs, ys]))
    pts = np.vstack(pts)
    if sigma > 0.0:
        pts = pts + rng.normal(0.0, sigma, pts.shape)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.column_stack([
        cx + pts[:, 0] * c - pts[:, 1] * s,
        cy + pts[:, 0] * s + pts[:, 1] * c,
        np.linspace(0.0, 1.5, len(pts)),
    ])


def _yaw_err_deg(a, b):
    d = abs((a - b) % (math.pi / 2.0))
    return math.degrees(min(d, math.pi / 2.0 - d))


def _lshape_trial(rng, n_edge, sigma, yaw_tol_deg, dim_tol):
    l = float(rng.uniform(3.0, 4.5))
    w = float(rng.uniform(1.5, 2.2))
    yaw = float(rng.uniform(0.0, math.pi))
    cx, cy = rng.uniform(-10.0, 10.0, 2)
    pts = _rect_outline(l, w, cx, cy, yaw, n_edge, sigma, rng)
    box = fit_lshape(pts)
    return (_yaw_err_deg(box.yaw, yaw) <= yaw_tol_deg
            and abs(box.l - l) <= dim_tol and abs(box.w - w) <= dim_tol)


def test_criterion_05_lshape():
    rng = np.random.default_rng(5)
    clean = sum(_lshape_trial(rng, 25, 0.0, 2.0, 0.05) for _ in range(100))
    noisy = sum(_lshape_trial(rng, 6, 0.02, 5.0, 0.10) for _ in range(100))
    _report(5, clean >= 98 and noisy >= 90,
            f"noiseless {clean}/100 (need 98), noisy {noisy}/100 (need 90)")


# ---------------------------------------------------------------------------
# 6. 3D IoU against Monte Carlo

def _in_box(pts, box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    bx = dx * c + dy * s
    by = -dx * s + dy * c
    return ((np.abs(bx) <= box.l / 2.0) & (np.abs(by) <= box.w / 2.0)
            & (np.abs(pts[:, 2] - box.cz) <= box.h / 2.0))


def _mc_iou(a, b, n, rng):
    from spl.geom import box3d_corners

    corners = np.vstack([box3d_corners(a), box3d_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, (n, 3))
    in_a, in_b = _in_box(pts, a), _in_box(pts, b)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return float(np.count_nonzero(in_a & in_b)) / union


def test_criterion_06_iou_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        a = Box3D(*rng.uniform(-1.0, 1.0, 2), float(rng.uniform(-0.5, 0.5)),
                  *rng.uniform(1.5, 4.0, 3), float(rng.uniform(0.0, math.pi)))
        b = Box3D(a.cx + float(rng.uniform(-2.0, 2.0)),
                  a.cy + float(rng.uniform(-2.0, 2.0)),
                  a.cz + float(rng.uniform(-1.0, 1.0)),
                  *rng.uniform(1.5, 4.0, 3), float(rng.uniform(0.0, math.pi)))
        diff = abs(iou_3d(a, b) - _mc_iou(a, b, 10 ** 6, rng))
        worst = max(worst, diff)
    _report(6, worst < 0.01, f"max |analytic - MC| = {worst:.4f}")


# ---------------------------------------------------------------------------
# 7. benchmark precision/recall and labeling ablations

def _bench_eval(frames, gt, **overrides):
    cfg = default_config()
    cfg["labeling"].update(overrides)
    labels = generate_labels(frames, cfg)
    return eval_labels(labels, gt, eval_thresholds(cfg),
                       cfg["eval"]["point_match_distance"])


def test_criterion_07_benchmark(benchmark_scene):
    frames, gt = benchmark_scene
    base = _bench_eval(frames, gt)
    thresholds_ok = all(s["precision"] >= 0.90 and s["recall"] >= 0.80
                        for s in base.per_class.values())
    bp, br = base.macro()

    no_points = _bench_eval(frames, gt, use_point_labels=False)
    points_ok = no_points.macro()[1] < br

    no_rp = _bench_eval(frames, gt, refine_points=False)
    rp_p, rp_r = no_rp.macro()
    rp_ok = rp_p < bp and rp_r < br

    no_rb = _bench_eval(frames, gt, refine_boxes=False)
    rb_p, rb_r = no_rb.macro()
    rb_ok = rb_p < bp and rb_r < br

    detail = (f"base P/R {bp:.3f}/{br:.3f}; "
              f"no-points R {no_points.macro()[1]:.3f}; "
              f"no-point-refine {rp_p:.3f}/{rp_r:.3f}; "
              f"no-box-refine {rb_p:.3f}/{rb_r:.3f}")
    _report(7, thresholds_ok and points_ok and rp_ok and rb_ok, detail)


# ---------------------------------------------------------------------------
# 8. staged training and stage ablations

def test_criterion_08_stage_pipeline(benchmark_scene):
    _, gt = benchmark_scene
    cfg = default_config()
    grid = grid_from_config(cfg)
    split = sparse_split_from_gt(gt, (0, 4, 6))

    recalls = {}
    fp_full = None
    t_full = None
    for stages in [(1, 2, 3), (2, 3), (1, 3)]:
        data = build_desk_dataset(gt, split, grid, cfg,
                                  np.random.default_rng(cfg["train"]["seed"]))
        t0 = time.perf_counter()
        state = train_pipeline(data, cfg, stages=stages)
        elapsed = time.perf_counter() - t0
        rep = mining_report(data, state, cfg)
        recalls[stages] = rep["mined_recall"]
        if stages == (1, 2, 3):
            fp_full = rep["false_positive_rate"]
            t_full = elapsed

    full = recalls[(1, 2, 3)]
    ok = (full >= 0.9 and fp_full <= 0.01 and t_full < 600.0
          and recalls[(2, 3)] < full and recalls[(1, 3)] < full)
    _report(8, ok,
            f"full {full:.3f} (fp {fp_full:.4f}, {t_full:.0f}s), "
            f"skip-stage1 {recalls[(2, 3)]:.3f}, "
            f"skip-stage2 {recalls[(1, 3)]:.3f}")


# ---------------------------------------------------------------------------
# 9. CLI determinism

_SCENE_TOML = """
[scene]
n_frames = 6
dt = 0.1
noise_sigma = 0.02
seed = 1

[[objects]]
class = 0
size = [4.4, 1.8, 1.5]
start = [10.0, -3.0]
velocity = [3.0, 0.0]
track_id = 0

[[objects]]
class = 1
size = [0.6, 0.6, 1.7]
start = [8.0, 2.0]
velocity = [1.2, 0.0]
track_id = 1

[[objects]]
class = 2
size = [1.8, 0.6, 1.7]
start = [14.0, 4.5]
velocity = [2.5, -0.5]
track_id = 2
"""

_TRAIN_TOML = """
[train]
epochs_stage1 = 1
epochs_stage2 = 1
epochs_stage3 = 2
"""


def _run_cli_sequence(root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scene.toml").write_text(_SCENE_TOML)
    (root / "train.toml").write_text(_TRAIN_TOML)
    runner = CliRunner()
    commands = [
        ["synth", "--spec", "scene.toml", "--out", "scene", "--seed", "2"],
        ["gen-labels", "--data", "scene"],
        ["eval-labels", "--pred", "scene/labels", "--gt", "scene",
         "--iou", "0.5,0.25,0.25", "--report", "report.json"],
        ["train", "--data", "scene", "--config", "train.toml",
         "--stages", "1,2,3", "--gt-tracks", "0,1,2", "--ckpt", "ckpt.bin"],
        ["inspect", "--ckpt", "ckpt.bin"],
    ]
    stdouts = []
    cwd = os.getcwd()
    try:
        os.chdir(root)
        for cmd in commands:
            res = runner.invoke(cli_main, cmd)
            assert res.exit_code == 0, (cmd, res.output)
            stdouts.append(res.output)
    finally:
        os.chdir(cwd)
    tree = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            tree[str(path.relative_to(root))] = path.read_bytes()
    return stdouts, tree


def test_criterion_09_cli_determinism(tmp_path):
    out_a = _run_cli_sequence(tmp_path / "run_a")
    out_b = _run_cli_sequence(tmp_path / "run_b")
    stdout_ok = out_a[0] == out_b[0]
    files_ok = (sorted(out_a[1]) == sorted(out_b[1])
                and all(out_a[1][k] == out_b[1][k] for k in out_a[1]))
    _report(9, stdout_ok and files_ok,
            f"stdout identical: {stdout_ok}, "
            f"{len(out_a[1])} files byte-identical: {files_ok}")


# ---------------------------------------------------------------------------
# 10. Eq. 4 exactness and shipped constants

def test_criterion_10_velocity_and_config():
    rng = np.random.default_rng(10)
    eq4_ok = True
    dt = 0.5  # a power of two keeps the arithmetic exact
    for _ in range(20):
        pos = rng.integers(-50, 51, (6, 3)).astype(float)
        track = TrackHistory(0, 0)
        for i, p in enumerate(pos):
            track.add(TrackEntry(i * dt, i, PointLabel(p, 0, 0, i, 5)))
        v = track_velocity(track)
        for i in range(1, 5):
            expect = (pos[i + 1] - pos[i - 1]) / (2.0 * dt)
            eq4_ok &= bool(np.array_equal(v[i], expect))

    cfg = default_config()
    classes = cfg["classes"]
    snapshot = [
        cfg["proto"]["num_prototypes"] == 5,
        cfg["proto"]["feature_dim"] == 64,
        cfg["proto"]["memory_capacity"] == 1000,
        cfg["loss"]["tau_s"] == 0.9,
        cfg["loss"]["tau_t"] == 1.0,
        cfg["loss"]["alpha"] == 0.9,
        cfg["loss"]["lambda1"] == 0.5,
        cfg["loss"]["lambda2"] == 1.0,
        all(classes[n]["dbscan_min_samples"] == 4 for n in classes),
        classes["Vehicle"]["dbscan_eps"] == 0.5,
        classes["Pedestrian"]["dbscan_eps"] == 0.3,
        classes["Cyclist"]["dbscan_eps"] == 0.3,
        classes["Vehicle"]["r1"] == 0.25,
        classes["Pedestrian"]["r1"] == 0.15,
        classes["Cyclist"]["r1"] == 0.15,
        cfg["labeling"]["spr_threshold"] == 0.8,
        cfg["labeling"]["spr_distance"] == 0.2,
        cfg["labeling"]["alignment_iou"] == 0.4,
    ]
    _report(10, eq4_ok and all(snapshot),
            f"Eq.4 exact: {eq4_ok}, constants: {sum(snapshot)}/{len(snapshot)}")
