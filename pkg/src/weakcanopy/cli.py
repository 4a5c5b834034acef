"""Command-line entry point: ``weakcanopy <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ingest import DATA_ROOT_ENV, Manifest, build_manifest, resolve_path
from .trainer import SEED_ENV, default_seed

log = logging.getLogger("weakcanopy")


def _paths(values, data_root):
    return [resolve_path(v, data_root) for v in values or []]


def cmd_ingest(args) -> int:
    truth = {}
    for item in args.truth or []:
        tile_id, _, path = item.partition("=")
        if not path:
            raise SystemExit(f"--truth expects TILE_ID=PATH, got {item!r}")
        truth[tile_id] = str(resolve_path(path, args.data_root))
    m = build_manifest(_paths(args.rasters, args.data_root), _paths(args.trees, args.data_root),
                       _paths(args.polygons, args.data_root), args.out, aoi=args.aoi, patch=args.patch,
                       fractions=tuple(args.split), seed=args.seed,
                       test_rasters=_paths(args.test_rasters, args.data_root), truth_paths=truth)
    print(f"{len(m.tiles)} tiles, {len(m.split.train_patches)} train / {len(m.split.val_patches)} val patches"
          f" -> {args.out}")
    return 0


def cmd_build_labels(args) -> int:
    from .pipeline import LabelConfig, build_tile_labels
    manifest = Manifest.load(resolve_path(args.manifest, args.data_root))
    cfg = LabelConfig(args.tree_radius, args.disk_radius, args.tree_shape)
    build_tile_labels(manifest, cfg, args.out)
    print(f"labels for {len(manifest.tiles)} tiles -> {args.out}")
    return 0


def cmd_objectness(args) -> int:
    from .pipeline import ObjectnessConfig, build_tile_objectness
    manifest = Manifest.load(resolve_path(args.manifest, args.data_root))
    cfg = ObjectnessConfig(args.alpha, args.step_cost, args.connectivity, not args.no_normalize)
    build_tile_objectness(manifest, args.labels, cfg, args.out)
    print(f"objectness bundles -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .synthcity import SceneSpec, generate_scene, scene_series, write_scene
    spec = SceneSpec()
    if args.spec:
        from .pipeline import read_config_file
        spec = SceneSpec.from_dict(read_config_file(resolve_path(args.spec, args.data_root)))
    spec = replace(spec, seed=args.seed if args.seed is not None else spec.seed)
    out = Path(args.out)
    if args.count == 1:
        paths = write_scene(generate_scene(spec), out, args.name)
        print(f"scene -> {paths['image']}")
        return 0
    specs = scene_series(spec, args.count, spec.seed)
    written = [write_scene(generate_scene(s), out, f"{args.name}{i:03d}") for i, s in enumerate(specs)]
    n_test = args.test_count
    if not 0 <= n_test < args.count:
        raise SystemExit("--test-count must be in [0, count)")
    train_w, test_w = written[:args.count - n_test], written[args.count - n_test:]
    m = build_manifest([w["image"] for w in train_w], [w["points"] for w in written],
                       [w["polygons"] for w in written], out / "manifest.json", patch=args.patch,
                       fractions=(1 - args.val_fraction, args.val_fraction), seed=spec.seed,
                       test_rasters=[w["image"] for w in test_w],
                       truth_paths={w["image"].stem: str(w["truth"]) for w in written})
    print(f"{args.count} scenes ({n_test} test), manifest -> {out / 'manifest.json'}"
          f" ({len(m.split.train_patches)} train / {len(m.split.val_patches)} val patches)")
    return 0


def _train_config(args):
    from .pipeline import read_config_file, train_config_from
    data = read_config_file(args.config) if args.config else {}
    if "train" in data:
        data = data["train"]
    return train_config_from(data, args.seed if args.seed is not None else default_seed())


def cmd_train(args) -> int:
    from .maskgen import load_scenarios
    from .model import NetConfig
    from .pipeline import load_training_arrays, train_scenario
    manifest = Manifest.load(resolve_path(args.manifest, args.data_root))
    scenario = load_scenarios(args.scenario_file)[args.scenario]
    cfg = _train_config(args)
    tr, va = load_training_arrays(manifest, args.labels, args.objectness if scenario.uses_objectness else None)
    net_config = NetConfig.preset(args.net_preset, tr.images.shape[1])
    train_scenario(scenario, tr, va, cfg, net_config, args.out)
    print(f"trained {args.scenario}: {len(tr)} train / {len(va)} val patches -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import EvalConfig, evaluate_run, load_training_arrays
    manifest = Manifest.load(resolve_path(args.manifest, args.data_root))
    protocols = ("sparse", "dense") if args.protocol == "both" else (args.protocol,)
    cfg = EvalConfig(protocols, args.threshold, not args.no_overlays, args.overlap)
    val = None if manifest.test_tiles else load_training_arrays(manifest, args.labels)[1]
    run = Path(args.run)
    report = evaluate_run(run, manifest, args.labels, args.checkpoint, cfg, args.name or run.name, args.patch, val,
                          Path(args.out).parent if args.out else run)
    doc = report.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"sparse_recall": doc["sparse"].get("recall"),
                      "dense_iou": (doc["dense"] or {}).get("iou_tree")}))
    return 0


def cmd_predict(args) -> int:
    from .geoio import load_raster, write_geotiff
    from .model import Checkpoint, predict_tile
    from .report import write_overlay
    net = Checkpoint.load(args.checkpoint).build()
    tile = load_raster(resolve_path(args.raster, args.data_root))
    pred = predict_tile(net, tile, patch=min(args.patch, *tile.shape), overlap=args.overlap)
    write_geotiff(args.out, pred.astype(np.float32), tile.geo_transform, tile.crs_id)
    if args.overlay:
        write_overlay(args.overlay, tile.pixels, pred, tile.geo_transform, tile.crs_id, args.threshold)
    print(f"prediction -> {args.out}")
    return 0


def cmd_report(args) -> int:
    from .evaluation import MetricsReport
    from .report import render_report
    runs = []
    for path in args.runs:
        p = Path(path)
        if p.is_dir():
            p = p / "eval" / "eval.json" if (p / "eval" / "eval.json").exists() else p / "eval.json"
        d = json.loads(p.read_text())
        runs.append(MetricsReport(d["scenario"], d.get("sparse") or {}, d.get("dense") or {}, d.get("cover") or {}))
    md, _ = render_report(runs, args.out, title=args.title)
    print(md, end="")
    return 0


def cmd_run(args) -> int:
    from .pipeline import load_config, run_pipeline
    cfg = load_config(args.config, args.data_root, args.seed)
    if args.jobs:
        cfg = replace(cfg, jobs=args.jobs)
    code, status = run_pipeline(cfg)
    for stage, st in status.items():
        print(f"{stage:32s} {st}")
    print("FAILED" if code else f"report -> {cfg.out / 'report.md'}")
    return code


def _global_flags(parser, suppress: bool):
    # Subcommands repeat the global flags without defaults, so values given
    # before the subcommand are not reset by the subparser.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help=f"random seed (default ${SEED_ENV} or 0)")
    parser.add_argument("--jobs", type=int, default=d(None), help="parallel worker processes")
    parser.add_argument("--data-root", default=d(None), help=f"base for relative input paths (${DATA_ROOT_ENV})")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="weakcanopy",
                                description="Tree-cover segmentation from incomplete point labels.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="tile rasters and write a dataset manifest")
    s.add_argument("--rasters", nargs="+", required=True)
    s.add_argument("--trees", nargs="*", default=[])
    s.add_argument("--polygons", nargs="*", default=[])
    s.add_argument("--test-rasters", nargs="*", default=[])
    s.add_argument("--truth", nargs="*", metavar="TILE_ID=PATH", help="dense ground truth per tile")
    s.add_argument("--aoi", nargs=4, type=float, metavar=("XMIN", "YMIN", "XMAX", "YMAX"))
    s.add_argument("--patch", type=int, default=300)
    s.add_argument("--split", nargs=2, type=float, default=(0.8, 0.2), metavar=("TRAIN", "VAL"))
    s.add_argument("--out", required=True, help="manifest path")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build-labels", parents=[common], help="rasterise tri-state labels per tile")
    s.add_argument("--manifest", required=True)
    s.add_argument("--tree-radius", type=float, default=0.6)
    s.add_argument("--disk-radius", type=float, default=1.5)
    s.add_argument("--tree-shape", choices=("square", "disk"), default="square")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_labels)

    s = sub.add_parser("objectness", parents=[common], help="watershed objectness bundles per patch")
    s.add_argument("--manifest", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--alpha", type=float, default=10.0)
    s.add_argument("--step-cost", type=float, default=0.01)
    s.add_argument("--connectivity", type=int, choices=(4, 8), default=4)
    s.add_argument("--no-normalize", action="store_true", help="keep raw path costs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_objectness)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    s.add_argument("--spec", help="scene spec (JSON/TOML/YAML)")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--test-count", type=int, default=0)
    s.add_argument("--patch", type=int, default=64)
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--name", default="scene")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train one scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--scenario-file")
    s.add_argument("--config", help="train settings (TOML/JSON/YAML)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--objectness")
    s.add_argument("--net-preset", choices=("desk", "paper"), default="desk")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="sparse/dense metrics for a run")
    s.add_argument("--run", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--protocol", choices=("sparse", "dense", "both"), default="both")
    s.add_argument("--checkpoint", default="val_recall",
                   choices=("last", "val_recall", "model_selection_iou", "val_ba"))
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--patch", type=int, default=64)
    s.add_argument("--overlap", type=int, default=0)
    s.add_argument("--no-overlays", action="store_true")
    s.add_argument("--name")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", parents=[common], help="probability raster for one tile")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--raster", required=True)
    s.add_argument("--patch", type=int, default=64)
    s.add_argument("--overlap", type=int, default=0)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--overlay")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", parents=[common], help="scenario comparison table")
    s.add_argument("--runs", nargs="*", default=[])
    s.add_argument("--title", default="Scenario comparison")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", parents=[common], help="full pipeline from an experiment config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.data_root:
        os.environ[DATA_ROOT_ENV] = args.data_root
    if args.seed is None and args.command not in ("synth", "run"):
        args.seed = default_seed()
    import torch
    torch.set_num_threads(max(1, args.jobs or 1))
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
