"""Synthetic urban scenes with complete tree ground truth.

A scene is rendered from simple primitives (pavement, lawns, a road, a
parking lot, sports pitches, buildings with shadows, textured tree
canopies, some leaf-off) and then degraded: only a random subset of trees
gets a jittered point label, and only the buildings, parking lots and
pitches are emitted as background polygons.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage
from shapely.geometry import box, mapping

from .geoio import GeoTransform, RasterTile, write_png
from .ingest import LabelPoint, PointLabelSet
from .labelgen import NEG, POS

_MAX_ATTEMPTS = 1000


@dataclass
class SceneSpec:
    extent_px: int = 256
    resolution: float = 0.2
    n_trees: int = 14
    tree_radius_m: tuple[float, float] = (2.0, 3.6)
    canopy_rgb: tuple[float, float, float] = (0.20, 0.36, 0.16)
    canopy_jitter: float = 0.05
    leaf_off_fraction: float = 0.2
    n_buildings: int = 2
    building_size_m: tuple[float, float] = (11.0, 17.0)
    n_roads: int = 1
    road_width_m: tuple[float, float] = (7.0, 10.0)
    n_parking: int = 1
    parking_size_m: tuple[float, float] = (15.0, 19.0)
    n_pitches: int = 1
    pitch_size_m: tuple[float, float] = (15.0, 19.0)
    n_lawns: int = 1
    label_keep_fraction: float = 0.5
    point_jitter_sigma: float = 0.3
    polygon_keep_fraction: float = 1.0
    shadows: bool = True
    seed: int = 0
    origin: tuple[float, float] = (560000.0, 5935000.0)
    crs_id: str = "EPSG:32632"

    def __post_init__(self):
        if not 0 <= self.label_keep_fraction <= 1:
            raise ValueError("label_keep_fraction must be in [0, 1]")
        if not 0 <= self.polygon_keep_fraction <= 1:
            raise ValueError("polygon_keep_fraction must be in [0, 1]")
        if self.point_jitter_sigma < 0:
            raise ValueError("point_jitter_sigma must be >= 0")
        if self.extent_px <= 0 or self.resolution <= 0:
            raise ValueError("extent_px and resolution must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**conv)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Tree:
    row: float
    col: float
    radius_px: float
    leaf_off: bool
    labelled: bool = False


@dataclass
class SyntheticScene:
    tile: RasterTile
    truth: np.ndarray
    points: PointLabelSet
    polygons: list[tuple[object, dict]]
    trees: list[Tree]
    spec: SceneSpec
    true_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


class OvercrowdedSceneError(ValueError):
    pass


def _smooth_noise(rng, shape, sigma, amp):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    n /= n.std() + 1e-12
    return n * amp


def _paint(img, mask, rgb, rng, amp=0.02, sigma=1.0):
    if not mask.any():
        return
    noise = _smooth_noise(rng, img.shape[:2], sigma, amp)
    for ch in range(3):
        img[..., ch][mask] = rgb[ch] + noise[mask]


def _rect_mask(shape, r0, c0, hh, ww):
    m = np.zeros(shape, bool)
    m[max(int(r0), 0):max(int(r0 + hh), 0), max(int(c0), 0):max(int(c0 + ww), 0)] = True
    return m


def _place_rect(rng, n, size_px, extent, occupied, margin_px):
    rects = []
    for _ in range(n):
        for _attempt in range(_MAX_ATTEMPTS):
            hh, ww = rng.uniform(*size_px, size=2)
            r0 = rng.uniform(0, extent - hh)
            c0 = rng.uniform(0, extent - ww)
            cand = (r0 - margin_px, c0 - margin_px, r0 + hh + margin_px, c0 + ww + margin_px)
            if all(cand[2] <= o[0] or o[2] <= cand[0] or cand[3] <= o[1] or o[3] <= cand[1] for o in occupied):
                rects.append((r0, c0, hh, ww))
                occupied.append((r0, c0, r0 + hh, c0 + ww))
                break
        else:
            raise OvercrowdedSceneError(f"could not place rectangle after {_MAX_ATTEMPTS} attempts")
    return rects


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Render one scene; deterministic for a given spec (including seed)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.extent_px
    px = 1.0 / spec.resolution
    shape = (n, n)
    transform = GeoTransform.from_origin(spec.origin[0], spec.origin[1] + n * spec.resolution, spec.resolution)
    img = np.zeros((n, n, 3), np.float64)
    rr, cc = np.mgrid[0:n, 0:n] + 0.5

    # pavement base with mild blotches
    base = np.array([0.56, 0.54, 0.50]) + rng.uniform(-0.04, 0.04, 3)
    _paint(img, np.ones(shape, bool), base, rng, amp=0.03, sigma=3.0)

    occupied: list[tuple] = []
    polygons: list[tuple[object, dict]] = []

    def rect_geom(r0, c0, hh, ww):
        x0, y0 = transform.to_world(c0, r0 + hh)
        x1, y1 = transform.to_world(c0 + ww, r0)
        return box(float(x0), float(y0), float(x1), float(y1))

    for r0, c0, hh, ww in _place_rect(rng, spec.n_lawns, (np.array(spec.pitch_size_m) * px), n, [], 0):
        _paint(img, _rect_mask(shape, r0, c0, hh, ww), (0.36, 0.50, 0.25), rng, amp=0.02, sigma=2.0)

    for _ in range(spec.n_roads):
        width = rng.uniform(*spec.road_width_m) * px
        pos = rng.uniform(0, n - width)
        road = _rect_mask(shape, pos, 0, width, n) if rng.random() < 0.5 else _rect_mask(shape, 0, pos, n, width)
        _paint(img, road, (0.30, 0.30, 0.32), rng, amp=0.015)

    for r0, c0, hh, ww in _place_rect(rng, spec.n_parking, np.array(spec.parking_size_m) * px, n, occupied, 1.5 * px):
        m = _rect_mask(shape, r0, c0, hh, ww)
        _paint(img, m, (0.40, 0.40, 0.41), rng, amp=0.015)
        stripes = m & (((cc - c0) % (2.5 * px)) < 0.6) & (((rr - r0) % (hh / 2)) > 1.0 * px)
        img[stripes] = 0.85
        polygons.append((rect_geom(r0, c0, hh, ww), {"highway": "service", "area": "yes"}))

    for r0, c0, hh, ww in _place_rect(rng, spec.n_pitches, np.array(spec.pitch_size_m) * px, n, occupied, 1.5 * px):
        m = _rect_mask(shape, r0, c0, hh, ww)
        _paint(img, m, (0.33, 0.55, 0.24), rng, amp=0.012, sigma=4.0)
        line = m & ~_rect_mask(shape, r0 + 0.5 * px, c0 + 0.5 * px, hh - px, ww - px)
        img[line] = 0.9
        polygons.append((rect_geom(r0, c0, hh, ww), {"leisure": "pitch"}))

    buildings = _place_rect(rng, spec.n_buildings, np.array(spec.building_size_m) * px, n, occupied, 1.5 * px)

    # trees: non-overlapping canopies, clear of buildings
    trees: list[Tree] = []
    bld_boxes = [(r0, c0, r0 + hh, c0 + ww) for r0, c0, hh, ww in buildings]
    open_boxes = list(occupied[:len(occupied) - len(buildings)])
    for _ in range(spec.n_trees):
        for _attempt in range(_MAX_ATTEMPTS):
            rad = rng.uniform(*spec.tree_radius_m) * px
            r, c = rng.uniform(0, n, size=2)
            if any(np.hypot(r - t.row, c - t.col) < rad + t.radius_px + 2 for t in trees):
                continue
            if any(b[0] - rad < r < b[2] + rad and b[1] - rad < c < b[3] + rad for b in bld_boxes):
                continue
            if any(b[0] < r < b[2] and b[1] < c < b[3] for b in open_boxes):
                continue
            trees.append(Tree(r, c, rad, bool(rng.random() < spec.leaf_off_fraction)))
            break
        else:
            raise OvercrowdedSceneError(f"could not place tree after {_MAX_ATTEMPTS} attempts")

    truth = np.zeros(shape, bool)
    for t in trees:
        d = np.hypot(rr - t.row, cc - t.col)
        disk = d <= t.radius_px
        truth |= disk
        tone = np.array(spec.canopy_rgb) + rng.normal(0, spec.canopy_jitter, 3)
        tex = _smooth_noise(rng, shape, 1.2, 0.06)
        shade = 1.0 - 0.35 * (d / t.radius_px) ** 2
        if t.leaf_off:
            # bare crowns: brown-grey branches over visible ground
            branches = _smooth_noise(rng, shape, 0.8, 1.0) > 0.3
            m = disk & (branches | (d < 0.25 * t.radius_px))
            for ch, v in enumerate((0.38, 0.33, 0.28)):
                img[..., ch][m] = v + tex[m]
        else:
            for ch in range(3):
                img[..., ch][disk] = (tone[ch] + tex[disk]) * shade[disk]

    if spec.shadows:
        off = 3.0 * px
        for r0, c0, hh, ww in buildings:
            m = _rect_mask(shape, r0 + off, c0 + off, hh, ww)
            img[m] *= 0.45

    roof_palette = [(0.62, 0.30, 0.24), (0.50, 0.50, 0.52), (0.30, 0.30, 0.34), (0.70, 0.62, 0.55)]
    for r0, c0, hh, ww in buildings:
        m = _rect_mask(shape, r0, c0, hh, ww)
        rgb = np.array(roof_palette[rng.integers(len(roof_palette))]) + rng.uniform(-0.03, 0.03, 3)
        _paint(img, m, rgb, rng, amp=0.015, sigma=2.0)
        ridge = m & (np.abs(rr - (r0 + hh / 2)) < 1.0)
        img[ridge] *= 0.8
        truth &= ~m
        polygons.append((rect_geom(r0, c0, hh, ww), {"building": "yes"}))

    if spec.polygon_keep_fraction < 1 and polygons:
        keep = rng.random(len(polygons)) < spec.polygon_keep_fraction
        polygons = [p for p, k in zip(polygons, keep) if k]

    # degrade: keep floor(p*N) trees, jitter their points
    n_keep = int(np.floor(spec.label_keep_fraction * len(trees)))
    chosen = sorted(rng.choice(len(trees), size=n_keep, replace=False).tolist()) if n_keep else []
    centers = np.array([transform.to_world(t.col, t.row) for t in trees], dtype=np.float64).reshape(-1, 2)
    pts = PointLabelSet(crs_id=spec.crs_id)
    for i in chosen:
        trees[i].labelled = True
        jitter = rng.normal(0.0, spec.point_jitter_sigma, 2) if spec.point_jitter_sigma > 0 else np.zeros(2)
        x, y = centers[i] + jitter
        pts.points.append(LabelPoint(float(x), float(y), "inventory", {"natural": "tree", "tree_id": str(i)}))

    tile = RasterTile(np.clip(img, 0.0, 1.0).astype(np.float32), transform, spec.crs_id)
    return SyntheticScene(tile, truth, pts, polygons, trees, spec, centers)


def points_geojson(points: PointLabelSet) -> dict:
    feats = [{"type": "Feature", "geometry": {"type": "Point", "coordinates": [p.x, p.y]},
              "properties": dict(p.attributes)} for p in points.points]
    return _collection(feats, points.crs_id)


def polygons_geojson(polygons, crs_id: str) -> dict:
    feats = [{"type": "Feature", "geometry": mapping(g), "properties": dict(tags)} for g, tags in polygons]
    return _collection(feats, crs_id)


def _collection(features, crs_id):
    out = {"type": "FeatureCollection", "features": features}
    if crs_id and crs_id != "unknown":
        out["crs"] = {"type": "name", "properties": {"name": crs_id}}
    return out


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_scene(scene: SyntheticScene, out_dir, name: str = "scene") -> dict[str, Path]:
    """Write the scene in the formats ingest reads; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = scene.tile
    paths = {
        "image": write_png(out / f"{name}.png", np.round(t.pixels * 255).astype(np.uint8),
                           t.geo_transform, t.crs_id),
        "truth": write_png(out / f"{name}_truth.png", scene.truth, t.geo_transform, t.crs_id, bilevel=True),
    }
    paths["points"] = out / f"{name}_trees.geojson"
    paths["points"].write_text(_dump(points_geojson(scene.points)))
    paths["polygons"] = out / f"{name}_polygons.geojson"
    paths["polygons"].write_text(_dump(polygons_geojson(scene.polygons, t.crs_id)))
    paths["spec"] = out / f"{name}.json"
    paths["spec"].write_text(_dump(scene.spec.to_dict()))
    return paths


def scene_series(base: SceneSpec, count: int, seed: int) -> list[SceneSpec]:
    """``count`` specs with distinct seeds and non-overlapping world origins."""
    specs = []
    size_m = base.extent_px * base.resolution
    for i in range(count):
        d = base.to_dict()
        d["seed"] = int(seed) * 1000 + i
        d["origin"] = [base.origin[0] + i * (size_m + 100.0), base.origin[1]]
        specs.append(SceneSpec.from_dict(d))
    return specs


def imbalance_ratio(y_eval: np.ndarray) -> float:
    """NEG:POS evaluated-pixel ratio of a sparse label raster."""
    pos = int(np.count_nonzero(y_eval == POS))
    neg = int(np.count_nonzero(y_eval == NEG))
    return neg / pos if pos else float("inf")


__all__ = ["SceneSpec", "SyntheticScene", "generate_scene", "write_scene", "scene_series",
           "imbalance_ratio", "OvercrowdedSceneError"]
