"""Synthetic-scene experiments: scenes -> patch stacks -> trained runs -> metrics.

This is the in-memory path used by the ablation acceptance run and by the
``run`` pipeline when its data source is ``synth``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import PatchArrays, extract_patches
from .evaluation import Confusion, dense_confusion, dense_metrics, sparse_confusion, sparse_metrics
from .ingest import classify_features, split_dataset, tile_raster
from .labelgen import Grid, LabelSet, build_labels
from .synthcity import (SceneSpec, SyntheticScene, generate_scene, imbalance_ratio, polygons_geojson,
                        scene_series)
from .trainer import predict_patches

log = logging.getLogger(__name__)


def scene_labels(scene: SyntheticScene, tree_radius_m: float = 0.6, disk_radius_m: float = 1.5) -> LabelSet:
    """Label rasters for a scene, routed through the same vector handling as real data."""
    feats = polygons_geojson(scene.polygons, scene.spec.crs_id)["features"]
    layers = classify_features(feats)
    grid = Grid(scene.tile.shape, scene.tile.geo_transform, scene.tile.crs_id)
    return build_labels(scene.points.xy(), layers, grid, tree_radius_m, disk_radius_m)


def scene_patches(scene: SyntheticScene, patch: int, tile_id: str, objectness: bool = True,
                  **objectness_kw) -> PatchArrays:
    labels = scene_labels(scene)
    refs = tile_raster(scene.tile, patch, patch, tile_id)
    return extract_patches(scene.tile.pixels, labels, refs, truth=scene.truth, objectness=objectness,
                           **objectness_kw)


def subset(data: PatchArrays, refs) -> PatchArrays:
    index = {r: i for i, r in enumerate(data.refs)}
    ii = np.array([index[r] for r in refs], dtype=np.int64)
    arrays = {}
    for name in ("images", "y", "y_eval", "objects", "disk", "o", "regions", "boundaries", "truth"):
        v = getattr(data, name)
        arrays[name] = None if v is None else v[ii]
    return PatchArrays(list(refs), **arrays)


@dataclass
class SyntheticData:
    train: PatchArrays
    val: PatchArrays
    test: PatchArrays

    @property
    def imbalance(self) -> float:
        """NEG:POS ratio over the sparse-protocol pixels of the test split."""
        return imbalance_ratio(self.test.y_eval)


def synthetic_data(base: SceneSpec, n_scenes: int = 20, n_test: int = 4, patch: int = 64,
                   val_fraction: float = 0.2, seed: int = 0, **objectness_kw) -> SyntheticData:
    """Generate ``n_scenes`` scenes; the last ``n_test`` form the test split.

    The remaining scenes are tiled and split into train/validation patches.
    """
    if not 0 < n_test < n_scenes:
        raise ValueError("need 0 < n_test < n_scenes")
    specs = scene_series(base, n_scenes, seed)
    parts = [scene_patches(generate_scene(s), patch, f"synth{i:03d}", **objectness_kw) for i, s in enumerate(specs)]
    pool = PatchArrays.concat(parts[:-n_test])
    test = PatchArrays.concat(parts[-n_test:])
    split = split_dataset(pool.refs, (1 - val_fraction, val_fraction), seed)
    return SyntheticData(subset(pool, split.train_patches), subset(pool, split.val_patches), test)


def evaluate_arrays(pred: np.ndarray, data: PatchArrays, threshold: float = 0.5) -> dict:
    """Sparse and dense metrics over a stack of patch predictions."""
    sc, dc = Confusion(), Confusion()
    for i in range(len(data)):
        sc = sc + sparse_confusion(pred[i], data.y_eval[i], threshold)
        if data.truth is not None:
            dc = dc + dense_confusion(pred[i], data.truth[i], threshold)
    out = {"sparse": sparse_metrics(sc)}
    if data.truth is not None:
        out["dense"] = dense_metrics(dc)
    return out


def evaluate_net(net, data: PatchArrays, threshold: float = 0.5) -> dict:
    return evaluate_arrays(predict_patches(net, data.images), data, threshold)
