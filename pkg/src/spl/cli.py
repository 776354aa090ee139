"""Command line interface.

Subcommands: synth, gen-labels, eval-labels, train, inspect.  All commands
are deterministic for fixed inputs and seeds.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from .boxlabel import read_labels, write_labels
from .ingest import load_sequence
from .pipeline import (
    build_desk_dataset,
    eval_labels,
    generate_labels,
    grid_from_config,
    mining_report,
    sparse_split_from_gt,
    train_pipeline,
)
from .proto import load_checkpoint, save_checkpoint
from .synth import (
    load_gt,
    spec_from_toml,
    standard_benchmark_spec,
    synth_scene,
    write_scene,
)


@click.group()
def main():
    """Pseudo-label generation and prototype training tools."""


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True),
              default=None, help="TOML scene description (default: built-in "
              "benchmark scene).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None, help="Override the scene seed.")
def synth(spec_path, out_dir, seed):
    """Generate a synthetic scene with ground truth."""
    if spec_path is not None:
        spec = spec_from_toml(spec_path, seed=seed)
    else:
        spec = standard_benchmark_spec(seed=0 if seed is None else seed)
    frames, gt = synth_scene(spec)
    write_scene(out_dir, frames, gt)
    n_pts = sum(len(fb.cloud) for fb in frames)
    click.echo(f"wrote {len(frames)} frames ({n_pts} points) to {out_dir}")


@main.command("gen-labels")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Label output directory (default: <data>/labels).")
def gen_labels(data_dir, config_path, out_dir):
    """Generate 3D pseudo labels for a sequence."""
    cfg = cfgmod.load_config(config_path)
    frames = load_sequence(data_dir)
    label_sets = generate_labels(frames, cfg)
    out_dir = out_dir or str(Path(data_dir) / "labels")
    write_labels(out_dir, label_sets)
    n_gt = sum(len(ls.gt_supervision) for ls in label_sets.values())
    n_box = sum(len(ls.pseudo_boxes) for ls in label_sets.values())
    n_pt = sum(len(ls.pseudo_points) for ls in label_sets.values())
    click.echo(f"wrote labels to {out_dir}: "
               f"{n_gt} gt boxes, {n_box} pseudo boxes, {n_pt} pseudo points")


@main.command("eval-labels")
@click.option("--pred", "pred_dir", type=click.Path(exists=True), required=True,
              help="Directory of predicted label jsonl files.")
@click.option("--gt", "gt_dir", type=click.Path(exists=True), required=True,
              help="Scene directory containing gt/.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--iou", "iou_csv", default=None,
              help="Per-class IoU thresholds, e.g. 0.5,0.25,0.25 "
              "(default: config values).")
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Optional JSON report output path.")
def eval_labels_cmd(pred_dir, gt_dir, config_path, iou_csv, report_path):
    """Score predicted labels against synthetic ground truth."""
    cfg = cfgmod.load_config(config_path)
    thresholds = cfgmod.eval_thresholds(cfg)
    if iou_csv is not None:
        values = [float(v) for v in iou_csv.split(",") if v.strip()]
        if len(values) != len(thresholds):
            raise click.UsageError(
                f"--iou needs {len(thresholds)} comma-separated values"
            )
        thresholds = dict(zip(sorted(thresholds), values))
    pred = read_labels(pred_dir)
    gt = load_gt(gt_dir)
    report = eval_labels(pred, gt, thresholds,
                         cfg["eval"]["point_match_distance"])
    for cid, stats in sorted(report.per_class.items()):
        click.echo(
            f"{cfgmod.CLASS_NAMES[cid]:<11} precision {stats['precision']:.3f} "
            f"recall {stats['recall']:.3f} "
            f"(tp {stats['tp']} fp {stats['fp']} fn {stats['fn']})"
        )
    if report_path is not None:
        Path(report_path).write_text(
            json.dumps(report.as_dict(), sort_keys=True, indent=2) + "\n"
        )
        click.echo(f"report written to {report_path}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="Scene directory containing gt/ (and labels/ unless "
              "--gt-tracks is given).")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--stages", default="1,2,3", show_default=True,
              help="Comma-separated stages to run.")
@click.option("--gt-tracks", default=None,
              help="Comma-separated track ids to treat as human GT "
              "(sparse split straight from gt/; skips labels/).")
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True)
def train(data_dir, config_path, stages, gt_tracks, ckpt_path):
    """Run the staged prototype training loop at desk scale."""
    cfg = cfgmod.load_config(config_path)
    stage_ids = tuple(int(s) for s in stages.split(",") if s.strip())
    gt = load_gt(data_dir)
    if gt_tracks is not None:
        tracks = [int(t) for t in gt_tracks.split(",") if t.strip()]
        label_sets = sparse_split_from_gt(gt, tracks)
    else:
        labels_dir = Path(data_dir) / "labels"
        if not labels_dir.exists():
            raise click.UsageError(
                f"{labels_dir} not found; run gen-labels first or pass "
                "--gt-tracks"
            )
        label_sets = read_labels(labels_dir)

    grid = grid_from_config(cfg)
    rng = np.random.default_rng(int(cfg["train"]["seed"]))
    data = build_desk_dataset(gt, label_sets, grid, cfg, rng)
    state = train_pipeline(data, cfg, stages=stage_ids)
    save_checkpoint(ckpt_path, state.bank, state.memory, state.head,
                    state.cls_weight, state.cls_bias)
    report = mining_report(data, state, cfg)
    click.echo(f"trained stages {stage_ids} over {len(data)} frames "
               f"({state.step} steps)")
    click.echo(f"mined recall {report['mined_recall']:.3f}, "
               f"background fp rate {report['false_positive_rate']:.5f}")
    click.echo(f"checkpoint written to {ckpt_path}")


@main.command()
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True),
              required=True)
def inspect(ckpt_path):
    """Print prototype norms and inter-class cosine structure."""
    ckpt = load_checkpoint(ckpt_path)
    P = ckpt["bank"].P
    C, K, D = P.shape
    click.echo(f"prototypes: {C} classes x {K} prototypes x {D} dims")
    for c in range(C):
        norms = np.linalg.norm(P[c], axis=1)
        click.echo(
            f"  {cfgmod.CLASS_NAMES[c]:<11} norms "
            + " ".join(f"{v:.4f}" for v in norms)
            + f"  memory {ckpt['memory'].count(c)}"
        )
    means = P.mean(axis=1)
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    click.echo("class-mean prototype cosines:")
    for a in range(C):
        row = " ".join(f"{float(means[a] @ means[b]):+.4f}" for b in range(C))
        click.echo(f"  {cfgmod.CLASS_NAMES[a]:<11} {row}")
    if ckpt["head"] is not None:
        w = ckpt["head"].weight
        click.echo(f"projection head: {w.shape[0]} -> {w.shape[1]}")
    if ckpt["cls_weight"] is not None:
        click.echo(f"cls head: {ckpt['cls_weight'].shape[1]} -> "
                   f"{ckpt['cls_weight'].shape[0]}")


if __name__ == "__main__":
    main()
