"""Configuration defaults and TOML loading.

Every tunable constant in the pipeline lives here with its shipped default,
so a config snapshot can be asserted in one place.  TOML files override keys
section by section.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import toml

VEHICLE, PEDESTRIAN, CYCLIST = 0, 1, 2
CLASS_NAMES = ("Vehicle", "Pedestrian", "Cyclist")
NUM_CLASSES = 3


@dataclass
class ClassGeometryConfig:
    """Per-class geometry gates used during point and box label generation."""

    h_min: float
    h_max: float
    dbscan_eps: float
    dbscan_min_samples: int
    r1: float
    r2: float
    min_points_for_box: int
    min_size: tuple
    avg_size: tuple
    max_size: tuple

    def validate(self) -> None:
        if not self.h_min < self.h_max:
            raise ValueError("h_min must be below h_max")
        if not self.r1 < self.r2:
            raise ValueError("r1 must be below r2")
        for lo, mid, hi in zip(self.min_size, self.avg_size, self.max_size):
            if not lo <= mid <= hi:
                raise ValueError("size bounds must be ordered min <= avg <= max")


def default_class_geometry() -> dict:
    return {
        VEHICLE: ClassGeometryConfig(
            h_min=1.2, h_max=4.5, dbscan_eps=0.5, dbscan_min_samples=4,
            r1=0.25, r2=1.0, min_points_for_box=30,
            min_size=(3.2, 1.5, 1.3), avg_size=(4.5, 1.8, 1.6),
            max_size=(6.5, 2.6, 2.8),
        ),
        PEDESTRIAN: ClassGeometryConfig(
            h_min=1.4, h_max=2.1, dbscan_eps=0.3, dbscan_min_samples=4,
            r1=0.15, r2=0.6, min_points_for_box=10,
            min_size=(0.4, 0.4, 1.4), avg_size=(0.7, 0.7, 1.75),
            max_size=(1.0, 1.0, 2.1),
        ),
        CYCLIST: ClassGeometryConfig(
            h_min=1.2, h_max=2.2, dbscan_eps=0.3, dbscan_min_samples=4,
            r1=0.15, r2=0.6, min_points_for_box=10,
            min_size=(1.2, 0.4, 1.2), avg_size=(1.8, 0.6, 1.7),
            max_size=(2.4, 1.0, 2.2),
        ),
    }


def default_config() -> dict:
    """The full shipped configuration as a nested plain dict."""
    classes = {}
    for cid, cfg in default_class_geometry().items():
        classes[CLASS_NAMES[cid]] = {
            "h_min": cfg.h_min, "h_max": cfg.h_max,
            "dbscan_eps": cfg.dbscan_eps,
            "dbscan_min_samples": cfg.dbscan_min_samples,
            "r1": cfg.r1, "r2": cfg.r2,
            "min_points_for_box": cfg.min_points_for_box,
            "min_size": list(cfg.min_size),
            "avg_size": list(cfg.avg_size),
            "max_size": list(cfg.max_size),
        }
    return {
        "labeling": {
            "dilate_px": 2,
            "aggregation_window": 2,
            "knn_k": 5,
            "spr_threshold": 0.8,
            "spr_distance": 0.2,
            "size_filter_low": 0.8,
            "size_filter_high": 1.2,
            "v_still": 0.5,
            "v_dyn": 1.0,
            "alignment_iou": 0.4,
            "gt_overlap_iou": 0.1,
            "use_point_labels": True,
            "refine_points": True,
            "refine_boxes": True,
            "mode": "unsupervised",
        },
        "ground": {
            "ransac_iterations": 1000,
            "inlier_distance": 0.15,
            "grid_cell": 0.5,
            "min_inlier_ratio": 0.1,
        },
        "classes": classes,
        "grid": {
            "x_min": -50.0, "x_max": 50.0,
            "y_min": -50.0, "y_max": 50.0,
            "cell": 0.5,
        },
        "loss": {
            "tau_t": 1.0,
            "tau_s": 0.9,
            "alpha": 0.9,
            "lambda1": 0.5,
            "lambda2": 1.0,
            "focal_alpha": 2.0,
            "focal_beta": 4.0,
            "eps_g": 1e-4,
        },
        "proto": {
            "num_prototypes": 5,
            "feature_dim": 64,
            "memory_capacity": 1000,
        },
        "train": {
            "epochs_stage1": 5,
            "epochs_stage2": 5,
            "epochs_stage3": 20,
            "lr": 0.05,
            "seed": 0,
            "raw_feature_dim": 32,
            "feature_noise": 0.1,
            "stage2_inter_loss": False,
        },
        "eval": {
            "iou_vehicle": 0.5,
            "iou_pedestrian": 0.25,
            "iou_cyclist": 0.25,
            "point_match_distance": 1.0,
        },
    }


def _merge(base: dict, override: dict) -> dict:
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _merge(base[key], val)
        else:
            base[key] = val
    return base


def load_config(path=None) -> dict:
    """Shipped defaults, optionally overridden by a TOML file."""
    cfg = default_config()
    if path is not None:
        with open(path, "r") as fh:
            _merge(cfg, toml.load(fh))
    return cfg


def class_geometry_from_config(cfg: dict) -> dict:
    out = {}
    for cid, name in enumerate(CLASS_NAMES):
        c = cfg["classes"][name]
        out[cid] = ClassGeometryConfig(
            h_min=c["h_min"], h_max=c["h_max"],
            dbscan_eps=c["dbscan_eps"],
            dbscan_min_samples=int(c["dbscan_min_samples"]),
            r1=c["r1"], r2=c["r2"],
            min_points_for_box=int(c["min_points_for_box"]),
            min_size=tuple(c["min_size"]),
            avg_size=tuple(c["avg_size"]),
            max_size=tuple(c["max_size"]),
        )
        out[cid].validate()
    return out


def eval_thresholds(cfg: dict) -> dict:
    e = cfg["eval"]
    return {
        VEHICLE: e["iou_vehicle"],
        PEDESTRIAN: e["iou_pedestrian"],
        CYCLIST: e["iou_cyclist"],
    }


def class_sizes(cfg: dict, which: str) -> dict:
    return {
        cid: tuple(cfg["classes"][name][which])
        for cid, name in enumerate(CLASS_NAMES)
    }
