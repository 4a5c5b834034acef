"""Config-driven pipeline: labels -> objectness -> train -> evaluate/predict -> report.

Every stage writes a ``.stamp`` holding a hash of its inputs (config
fragment, upstream stamps, input file digests).  A stage whose stamp
matches is skipped.  Any failure leaves a ``FAILED`` file in the output
root and a nonzero exit status.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .dataset import PatchArrays, extract_patches, patch_bundles
from .evaluation import (Confusion, MetricsReport, dense_confusion, dense_metrics, sparse_confusion,
                         sparse_metrics, tree_cover_area)
from .experiment import subset
from .geoio import GeoTransform, load_raster, read_array, write_geotiff
from .ingest import Manifest, PatchRef, load_points, load_polygons, resolve_path
from .labelgen import Grid, build_labels, rasterize_polygons
from .maskgen import ScenarioConfig, load_scenarios
from .model import Checkpoint, NetConfig, predict_tile
from .report import render_report, write_overlay
from .store import file_digest, load_labels, load_patch_bundles, save_labels, save_patch_bundles
from .trainer import CRITERIA, TrainConfig, make_net, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

STAMP = ".stamp"
FAILED = "FAILED"


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------

@dataclass
class LabelConfig:
    tree_radius_m: float = 0.6
    disk_radius_m: float = 1.5
    tree_shape: str = "square"


@dataclass
class ObjectnessConfig:
    alpha: float = 10.0
    step_cost: float = 0.01
    connectivity: int = 4
    normalize: bool = True


@dataclass
class EvalConfig:
    protocols: tuple[str, ...] = ("sparse", "dense")
    threshold: float = 0.5
    overlays: bool = True
    overlap: int = 0


@dataclass
class ExperimentConfig:
    manifest: Path
    out: Path
    scenarios: tuple[str, ...] = ("baseline", "obj", "mask", "maskobj", "maskobjthresh")
    seed: int = 0
    checkpoint: str = "val_recall"
    net_preset: str = "desk"
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    labels: LabelConfig = field(default_factory=LabelConfig)
    objectness: ObjectnessConfig = field(default_factory=ObjectnessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scenario_file: Path | None = None
    jobs: int = 1

    def scenario_table(self) -> dict[str, ScenarioConfig]:
        return load_scenarios(self.scenario_file)


_TOP_KEYS = {"manifest", "out", "scenarios", "seed", "checkpoint", "net_preset", "train", "labels",
             "objectness", "eval", "scenario_file", "jobs"}


def _check_keys(section: str, data: dict, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _sub(cls, section: str, data: dict | None, base=None):
    data = dict(data or {})
    allowed = {f.name for f in fields(cls)}
    _check_keys(section, data, allowed)
    for k, v in list(data.items()):
        if isinstance(v, list):
            data[k] = tuple(v)
    return replace(base, **data) if base is not None else cls(**data)


def read_config_file(path) -> dict:
    """Parse a TOML, JSON or YAML file into a dict (by extension)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    suffix = path.suffix.lower()
    text = path.read_text()
    if suffix == ".toml":
        return tomllib.loads(text)
    if suffix == ".json":
        return json.loads(text)
    if suffix in (".yaml", ".yml"):
        import yaml
        return yaml.safe_load(text) or {}
    raise ConfigError(f"unsupported config format: {path.suffix}")


def train_config_from(data: dict | None, seed: int) -> TrainConfig:
    data = dict(data or {})
    preset = data.pop("preset", "desk")
    if preset not in ("desk", "paper"):
        raise ConfigError(f"unknown train preset {preset!r}")
    base = TrainConfig.desk() if preset == "desk" else TrainConfig()
    cfg = _sub(TrainConfig, "train", data, base)
    return replace(cfg, seed=data.get("seed", seed))


def parse_config(data: dict, base_dir=None, data_root=None, seed: int | None = None) -> ExperimentConfig:
    """Validate a config mapping; rejects unknown keys and missing paths."""
    _check_keys("config", data, _TOP_KEYS)
    for key in ("manifest", "out"):
        if key not in data:
            raise ConfigError(f"config needs {key!r}")
    base = Path(base_dir) if base_dir else Path.cwd()

    def path_of(p):
        p = Path(p)
        if p.is_absolute() or not (base / p).exists():
            return resolve_path(p, data_root)
        return base / p

    manifest = path_of(data["manifest"])
    if not manifest.exists():
        raise ConfigError(f"manifest not found: {manifest}")
    out = Path(data["out"])
    out = out if out.is_absolute() else base / out
    seed = int(data.get("seed", 0) if seed is None else seed)
    scenarios = tuple(data.get("scenarios", ExperimentConfig.scenarios))
    if len(set(scenarios)) != len(scenarios):
        raise ConfigError("scenario names must be unique")
    scenario_file = path_of(data["scenario_file"]) if data.get("scenario_file") else None
    if scenario_file is not None and not scenario_file.exists():
        raise ConfigError(f"scenario file not found: {scenario_file}")
    cfg = ExperimentConfig(
        manifest=manifest, out=out, scenarios=scenarios, seed=seed,
        checkpoint=data.get("checkpoint", "val_recall"), net_preset=data.get("net_preset", "desk"),
        train=train_config_from(data.get("train"), seed),
        labels=_sub(LabelConfig, "labels", data.get("labels")),
        objectness=_sub(ObjectnessConfig, "objectness", data.get("objectness")),
        eval=_sub(EvalConfig, "eval", data.get("eval")),
        scenario_file=scenario_file, jobs=int(data.get("jobs", 1)),
    )
    table = cfg.scenario_table()
    missing = [s for s in scenarios if s not in table]
    if missing:
        raise ConfigError(f"unknown scenario(s) {missing}; available {sorted(table)}")
    if cfg.checkpoint not in ("last",) + CRITERIA:
        raise ConfigError(f"checkpoint must be 'last' or one of {CRITERIA}")
    if cfg.net_preset not in ("desk", "paper"):
        raise ConfigError(f"unknown net preset {cfg.net_preset!r}")
    bad = set(cfg.eval.protocols) - {"sparse", "dense"}
    if bad:
        raise ConfigError(f"unknown eval protocol(s) {sorted(bad)}")
    return cfg


def load_config(path, data_root=None, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    return parse_config(read_config_file(path), path.parent, data_root, seed)


# -- stamps ----------------------------------------------------------------

def content_key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def read_stamp(out_dir) -> str | None:
    p = Path(out_dir) / STAMP
    return p.read_text().strip() if p.exists() else None


def run_stage(name: str, out_dir, key_obj, fn: Callable[[Path], Any], status: dict) -> str:
    """Run ``fn(out_dir)`` unless ``out_dir`` carries a stamp for the same inputs."""
    out = Path(out_dir)
    key = content_key({"stage": name, "inputs": key_obj})
    if read_stamp(out) == key:
        log.info("%s: up to date, skipped", name)
        status[name] = "skipped"
        return key
    if out.exists():
        (out / STAMP).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    log.info("%s: running", name)
    fn(out)
    (out / STAMP).write_text(key + "\n")
    status[name] = "ran"
    return key


# -- data loading helpers --------------------------------------------------

def manifest_inputs(manifest: Manifest, manifest_path: Path) -> dict:
    """Digests of every file the manifest points at."""
    files = [t.image for t in manifest.tiles] + [t.truth for t in manifest.tiles if t.truth]
    files += manifest.points + manifest.polygons
    return {"manifest": file_digest(manifest_path),
            "files": {f: file_digest(manifest.path(f)) for f in sorted(files)}}


def tile_grid(entry) -> Grid:
    return Grid(tuple(entry.shape), GeoTransform.from_gdal(entry.geo_transform), entry.crs_id)


def load_truth(manifest: Manifest, entry, grid: Grid) -> np.ndarray | None:
    """Dense ground truth from a mask raster or a polygon file (rasterised)."""
    if not entry.truth:
        return None
    path = manifest.path(entry.truth)
    if path.suffix.lower() in (".geojson", ".json"):
        doc = json.loads(path.read_text() or '{"features": []}')
        from shapely.geometry import shape as to_shape
        from .ingest import repair_polygon
        geoms = [repair_polygon(to_shape(f["geometry"])) for f in doc.get("features", []) if f.get("geometry")]
        return rasterize_polygons([g for g in geoms if g is not None], grid)
    arr, _, _ = read_array(path)
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.shape != grid.shape:
        raise ValueError(f"{path}: ground truth shape {arr.shape} != tile shape {grid.shape}")
    return arr > 0


def build_tile_labels(manifest: Manifest, cfg: LabelConfig, out_dir) -> None:
    """Label rasters for every tile (training and test) under ``out_dir/<tile_id>/``."""
    out = Path(out_dir)
    layers_all = []
    for p in manifest.polygons:
        layers_all.extend(load_polygons(manifest.path(p), manifest.class_specs, manifest.aoi))
    for entry in manifest.tiles:
        grid = tile_grid(entry)
        xy = []
        for p in manifest.points:
            pts = load_points(manifest.path(p), manifest.tag_filter, manifest.aoi, crs_id=entry.crs_id)
            xy.append(pts.xy())
        xy = np.concatenate(xy) if xy else np.zeros((0, 2))
        labels = build_labels(xy, layers_all, grid, cfg.tree_radius_m, cfg.disk_radius_m, cfg.tree_shape)
        save_labels(labels, out / entry.tile_id, grid.transform, grid.crs_id)


def training_refs(manifest: Manifest) -> dict[str, list[PatchRef]]:
    by_tile: dict[str, list[PatchRef]] = {}
    for ref in manifest.split.train_patches + manifest.split.val_patches:
        by_tile.setdefault(ref.tile_id, []).append(ref)
    return {t: sorted(refs) for t, refs in sorted(by_tile.items())}


def build_tile_objectness(manifest: Manifest, labels_dir, cfg: ObjectnessConfig, out_dir) -> None:
    out = Path(out_dir)
    for tile_id, refs in training_refs(manifest).items():
        tile = load_raster(manifest.path(manifest.tile(tile_id).image))
        labels = load_labels(Path(labels_dir) / tile_id)
        bundles = patch_bundles(tile.pixels, labels.points_rc, refs, cfg.alpha, cfg.step_cost,
                                cfg.connectivity, cfg.normalize)
        save_patch_bundles(out / tile_id, refs, bundles)


def load_training_arrays(manifest: Manifest, labels_dir, objectness_dir=None) -> tuple[PatchArrays, PatchArrays]:
    parts = []
    for tile_id, refs in training_refs(manifest).items():
        entry = manifest.tile(tile_id)
        tile = load_raster(manifest.path(entry.image))
        labels = load_labels(Path(labels_dir) / tile_id)
        bundles = None
        if objectness_dir is not None:
            stored_refs, bundles = load_patch_bundles(Path(objectness_dir) / tile_id)
            if stored_refs != refs:
                raise ValueError(f"objectness for {tile_id} was built for a different tiling")
        truth = load_truth(manifest, entry, tile_grid(entry))
        parts.append(extract_patches(tile.pixels, labels, refs, truth=truth, bundles=bundles))
    if not parts:
        raise ValueError("manifest has no training patches")
    pool = PatchArrays.concat(parts)
    return subset(pool, manifest.split.train_patches), subset(pool, manifest.split.val_patches)


def checkpoint_path(run_dir, which: str) -> Path:
    run_dir = Path(run_dir)
    if which == "last":
        return run_dir / "last.ckpt"
    path = run_dir / f"best_{which}.ckpt"
    if not path.exists():
        log.warning("%s missing, using last.ckpt", path.name)
        return run_dir / "last.ckpt"
    return path


def train_scenario(scenario: ScenarioConfig, train_data: PatchArrays, val_data: PatchArrays, cfg: TrainConfig,
                   net_config: NetConfig, out_dir) -> None:
    net = make_net(net_config, cfg.seed)
    train(net, train_data, val_data, cfg, scenario, out_dir)


def evaluate_run(run_dir, manifest: Manifest, labels_dir, which: str, cfg: EvalConfig, scenario: str,
                 patch: int, val_data: PatchArrays | None = None, out_dir=None) -> MetricsReport:
    """Metrics on the manifest's test tiles (or the validation patches if there are none).

    Prediction rasters and overlays for test tiles go to ``out_dir``.
    """
    ck = Checkpoint.load(checkpoint_path(run_dir, which))
    net = ck.build()
    out = Path(out_dir or run_dir)
    sc, dc = Confusion(), Confusion()
    have_truth, area_m2, extent_m2 = False, 0.0, 0.0
    if manifest.test_tiles:
        for tile_id in manifest.test_tiles:
            entry = manifest.tile(tile_id)
            tile = load_raster(manifest.path(entry.image))
            labels = load_labels(Path(labels_dir) / tile_id)
            pred = predict_tile(net, tile, patch=min(patch, *tile.shape), overlap=cfg.overlap)
            sc = sc + sparse_confusion(pred, labels.y_eval, cfg.threshold)
            truth = load_truth(manifest, entry, tile_grid(entry))
            if truth is not None:
                have_truth = True
                dc = dc + dense_confusion(pred, truth, cfg.threshold)
            area, _ = tree_cover_area(pred, tile.resolution, cfg.threshold)
            area_m2 += area
            extent_m2 += pred.size * tile.resolution ** 2
            write_geotiff(out / f"pred_{tile_id}.tif", pred.astype(np.float32), tile.geo_transform, tile.crs_id)
            if cfg.overlays:
                write_overlay(out / f"overlay_{tile_id}.png", tile.pixels, pred, tile.geo_transform, tile.crs_id,
                              cfg.threshold)
    elif val_data is not None and len(val_data):
        from .trainer import predict_patches
        pred = predict_patches(net, val_data.images)
        for i in range(len(val_data)):
            sc = sc + sparse_confusion(pred[i], val_data.y_eval[i], cfg.threshold)
            if val_data.truth is not None:
                have_truth = True
                dc = dc + dense_confusion(pred[i], val_data.truth[i], cfg.threshold)
        res = GeoTransform.from_gdal(manifest.tiles[0].geo_transform).resolution
        area_m2, _ = tree_cover_area(pred, res, cfg.threshold)
        extent_m2 = pred.size * res ** 2
    else:
        raise ValueError("nothing to evaluate: no test tiles and no validation patches")
    report = MetricsReport(scenario)
    if "sparse" in cfg.protocols:
        report.sparse = sparse_metrics(sc)
    if "dense" in cfg.protocols and have_truth:
        report.dense = dense_metrics(dc)
    report.cover = {"area_m2": area_m2, "percent": 100.0 * area_m2 / extent_m2 if extent_m2 else 0.0}
    report_meta = {"checkpoint": checkpoint_path(run_dir, which).name, "epoch": ck.epoch}
    (out / "eval.json").write_text(json.dumps({**report.to_json(), **report_meta}, indent=1, sort_keys=True) + "\n")
    return report


# -- orchestration ---------------------------------------------------------

def _scenario_job(args) -> tuple[str, dict]:
    (cfg, name, labels_dir, obj_dir, labels_key, obj_key, manifest_key) = args
    import torch
    torch.set_num_threads(1)
    status: dict = {}
    manifest = Manifest.load(cfg.manifest)
    scenario = cfg.scenario_table()[name]
    run_dir = cfg.out / "runs" / name
    net_config = NetConfig.preset(cfg.net_preset, _in_channels(manifest))
    tcfg = replace(cfg.train, seed=cfg.seed)
    train_key = {"scenario": scenario.to_dict(), "train": asdict(tcfg), "net": asdict(net_config),
                 "labels": labels_key, "objectness": obj_key if scenario.uses_objectness else None}
    data = {}

    def arrays():
        if "arrays" not in data:
            data["arrays"] = load_training_arrays(manifest, labels_dir, obj_dir if scenario.uses_objectness else None)
        return data["arrays"]

    def do_train(out):
        tr, va = arrays()
        train_scenario(scenario, tr, va, tcfg, net_config, out)

    tkey = run_stage(f"train:{name}", run_dir, train_key, do_train, status)
    eval_key = {"train": tkey, "eval": asdict(cfg.eval), "checkpoint": cfg.checkpoint, "manifest": manifest_key,
                "labels": labels_key}

    def do_eval(out):
        va = None if manifest.test_tiles else arrays()[1]
        evaluate_run(run_dir, manifest, labels_dir, cfg.checkpoint, cfg.eval, name, tcfg.patch, va, out)

    run_stage(f"evaluate:{name}", run_dir / "eval", eval_key, do_eval, status)
    return name, status


def _in_channels(manifest: Manifest) -> int:
    return load_raster(manifest.path(manifest.tiles[0].image)).channels


def run_pipeline(cfg: ExperimentConfig) -> tuple[int, dict]:
    """Run every stage; returns ``(exit status, per-stage status)``."""
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    failed = out / FAILED
    status: dict = {}
    stage = "setup"
    try:
        manifest = Manifest.load(cfg.manifest)
        mkey = manifest_inputs(manifest, cfg.manifest)
        labels_dir, obj_dir = out / "labels", out / "objectness"
        stage = "labels"
        lkey = run_stage("labels", labels_dir, {"manifest": mkey, "labels": asdict(cfg.labels)},
                         lambda d: build_tile_labels(manifest, cfg.labels, d), status)
        okey = None
        table = cfg.scenario_table()
        if any(table[s].uses_objectness for s in cfg.scenarios):
            stage = "objectness"
            okey = run_stage("objectness", obj_dir, {"labels": lkey, "objectness": asdict(cfg.objectness),
                                                     "manifest": mkey},
                             lambda d: build_tile_objectness(manifest, labels_dir, cfg.objectness, d), status)
        jobs = [(cfg, s, labels_dir, obj_dir, lkey, okey, mkey) for s in cfg.scenarios]
        stage = "train/evaluate"
        if cfg.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
                results = list(ex.map(_scenario_job, jobs))
        else:
            results = [_scenario_job(j) for j in jobs]
        for _, st in results:
            status.update(st)
        stage = "report"
        eval_stamps = [read_stamp(out / "runs" / s / "eval") for s in cfg.scenarios]

        def do_report(d):
            reports = [json.loads((out / "runs" / s / "eval" / "eval.json").read_text()) for s in cfg.scenarios]
            runs = [MetricsReport(r["scenario"], r.get("sparse") or {}, r.get("dense") or {}, r.get("cover") or {})
                    for r in reports]
            render_report(runs, d)

        run_stage("report", out / "report", {"evals": eval_stamps}, do_report, status)
        for name in ("report.md", "report.json"):
            shutil.copyfile(out / "report" / name, out / name)
    except Exception as exc:
        log.error("pipeline failed in %s: %s", stage, exc)
        failed.write_text(f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n")
        return 1, status
    failed.unlink(missing_ok=True)
    return 0, status
