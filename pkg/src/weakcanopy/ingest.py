"""Vector label loading, patch tiling, dataset splitting and the manifest."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Polygon, shape
from shapely.validation import make_valid

from .geoio import RasterTile, load_raster  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "WEAKCANOPY_DATA_ROOT"
SOURCE_TAGS = ("inventory", "osm")


@dataclass
class LabelPoint:
    x: float
    y: float
    source: str = "inventory"
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass
class PointLabelSet:
    points: list[LabelPoint] = field(default_factory=list)
    crs_id: str = "unknown"
    rejected: int = 0

    def __len__(self):
        return len(self.points)

    def xy(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.points], dtype=np.float64).reshape(-1, 2)

    def merged(self, other: "PointLabelSet") -> "PointLabelSet":
        return PointLabelSet(self.points + other.points, self.crs_id, self.rejected + other.rejected)


@dataclass
class PolygonLayer:
    """Background (non-tree) polygons sharing one buffer distance."""

    name: str
    features: list[tuple[Polygon | MultiPolygon, dict[str, Any]]] = field(default_factory=list)
    buffer_m: float = 0.0
    rejected: int = 0

    def __len__(self):
        return len(self.features)

    @property
    def geometries(self) -> list:
        return [g for g, _ in self.features]


@dataclass(frozen=True)
class ClassSpec:
    name: str
    tags: dict[str, Any]
    buffer_m: float
    area_only: bool = True


# Non-tree classes with their negative buffers; ``True`` matches any value.
DEFAULT_CLASS_SPECS = (
    ClassSpec("buildings", {"building": True}, -5.0),
    ClassSpec("roads", {"highway": True}, -7.0),
    ClassSpec("pitches", {"leisure": "pitch"}, -7.0),
)


class PatchRef(NamedTuple):
    tile_id: str
    row: int
    col: int
    size: int


@dataclass
class DatasetSplit:
    train_patches: list[PatchRef]
    val_patches: list[PatchRef]
    test_patches: list[PatchRef] = field(default_factory=list)
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "train": [list(p) for p in self.train_patches],
            "val": [list(p) for p in self.val_patches],
            "test": [list(p) for p in self.test_patches],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetSplit":
        conv = lambda seq: [PatchRef(str(t), int(r), int(c), int(s)) for t, r, c, s in seq]
        return cls(conv(data["train"]), conv(data["val"]), conv(data.get("test", [])), int(data.get("seed", 0)))


def resolve_path(path, data_root=None) -> Path:
    """Resolve relative paths against ``data_root`` or ``$WEAKCANOPY_DATA_ROOT``."""
    path = Path(path)
    if path.is_absolute():
        return path
    root = data_root or os.environ.get(DATA_ROOT_ENV)
    if root and not path.exists():
        return Path(root) / path
    return path


def tags_match(props: dict[str, Any], tag_filter: dict[str, Any] | None) -> bool:
    if not tag_filter:
        return True
    for key, want in tag_filter.items():
        if key not in props or props[key] in (None, "no", False):
            return False
        if want is True:
            continue
        if str(props[key]) != str(want):
            return False
    return True


def _in_aoi(x: float, y: float, aoi) -> bool:
    if aoi is None:
        return True
    minx, miny, maxx, maxy = aoi
    return minx <= x <= maxx and miny <= y <= maxy


def _declared_crs(collection: dict) -> str | None:
    crs = collection.get("crs")
    if isinstance(crs, dict):
        name = crs.get("properties", {}).get("name")
        if name:
            # urn:ogc:def:crs:EPSG::32632 -> EPSG:32632
            if "EPSG" in name.upper():
                return "EPSG:" + name.replace("::", ":").split(":")[-1]
            return name
    elif isinstance(crs, str):
        return crs
    return None


def _check_crs(declared: str | None, target: str | None, path) -> None:
    if declared and target and target != "unknown" and declared != target:
        raise ValueError(
            f"{path}: declared CRS {declared} differs from raster CRS {target}; "
            "reproject the vector file first"
        )


def _read_features(path: Path) -> tuple[list[dict], str | None]:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("type") == "Feature":
        return [data], _declared_crs(data)
    return list(data.get("features", [])), _declared_crs(data)


def load_points(path, tag_filter: dict[str, Any] | None = None, aoi=None, source: str = "inventory",
                crs_id: str | None = None) -> PointLabelSet:
    """Read point labels from GeoJSON or a delimited ``x,y[,tag...]`` table.

    Features failing ``tag_filter`` or falling outside ``aoi``
    (minx, miny, maxx, maxy) are dropped; malformed records are logged and
    counted in ``rejected``.
    """
    if source not in SOURCE_TAGS:
        raise ValueError(f"source must be one of {SOURCE_TAGS}")
    path = Path(path)
    out = PointLabelSet(crs_id=crs_id or "unknown")
    if path.suffix.lower() in (".csv", ".txt", ".tsv"):
        delim = "\t" if path.suffix.lower() == ".tsv" else ","
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh, delimiter=delim), start=2):
                try:
                    x, y = float(row.pop("x")), float(row.pop("y"))
                except (KeyError, TypeError, ValueError):
                    log.warning("%s:%d: unparseable record skipped", path, lineno)
                    out.rejected += 1
                    continue
                attrs = {k: v for k, v in row.items() if k is not None and v not in (None, "")}
                if tags_match(attrs, tag_filter) and _in_aoi(x, y, aoi):
                    out.points.append(LabelPoint(x, y, source, attrs))
        return out

    features, declared = _read_features(path)
    _check_crs(declared, crs_id, path)
    for i, feat in enumerate(features):
        props = feat.get("properties") or {}
        if not tags_match(props, tag_filter):
            continue
        geom = feat.get("geometry") or {}
        try:
            if geom.get("type") != "Point":
                raise ValueError(f"geometry type {geom.get('type')!r}")
            x, y = (float(v) for v in geom["coordinates"][:2])
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ValueError("non-finite coordinate")
        except (KeyError, TypeError, ValueError) as exc:
            log.warning("%s: feature %d skipped (%s)", path, i, exc)
            out.rejected += 1
            continue
        if _in_aoi(x, y, aoi):
            out.points.append(LabelPoint(x, y, source, {k: str(v) for k, v in props.items()}))
    return out


def repair_polygon(geom) -> Polygon | MultiPolygon | None:
    """Return a valid polygonal geometry with positive area, or ``None``."""
    if geom is None or geom.is_empty:
        return None
    if not geom.is_valid:
        geom = make_valid(geom)
    if isinstance(geom, (Polygon, MultiPolygon)):
        poly = geom
    else:
        parts = [g for g in getattr(geom, "geoms", []) if isinstance(g, (Polygon, MultiPolygon))]
        if not parts:
            return None
        poly = shapely.union_all(parts)
    if poly.is_empty or poly.area <= 0:
        return None
    return poly


def load_polygons(path, class_specs: Sequence[ClassSpec] = DEFAULT_CLASS_SPECS, aoi=None,
                  crs_id: str | None = None) -> list[tuple[PolygonLayer, float]]:
    """Read background polygons, one layer per class spec.

    Only polygonal features are kept (roads stored as lines or points carry
    no area).  Invalid rings are repaired; unrepairable ones are dropped.
    """
    path = Path(path)
    if path.exists() and path.stat().st_size > 0:
        features, declared = _read_features(path)
    else:
        features, declared = [], None
    _check_crs(declared, crs_id, path)
    return classify_features(features, class_specs, aoi, source=str(path))


def classify_features(features: Sequence[dict], class_specs: Sequence[ClassSpec] = DEFAULT_CLASS_SPECS,
                      aoi=None, source: str = "<memory>") -> list[tuple[PolygonLayer, float]]:
    """Sort GeoJSON-style feature dicts into one buffered layer per class spec."""
    layers = [PolygonLayer(spec.name, buffer_m=spec.buffer_m) for spec in class_specs]
    for i, feat in enumerate(features):
        props = feat.get("properties") or {}
        for spec, layer in zip(class_specs, layers):
            if not tags_match(props, spec.tags):
                continue
            gj = feat.get("geometry") or {}
            if spec.area_only and gj.get("type") not in ("Polygon", "MultiPolygon"):
                continue
            try:
                geom = repair_polygon(shape(gj))
            except Exception as exc:  # shapely raises assorted types on bad coordinates
                log.warning("%s: feature %d unreadable (%s)", source, i, exc)
                geom = None
            if geom is None:
                log.warning("%s: feature %d dropped after repair", source, i)
                layer.rejected += 1
                continue
            if aoi is not None and not geom.intersects(shapely.box(*aoi)):
                continue
            layer.features.append((geom, dict(props)))
    return [(layer, layer.buffer_m) for layer in layers]


def _axis_offsets(length: int, patch: int, stride: int) -> list[int]:
    offs = list(range(0, length - patch + 1, stride))
    if offs[-1] != length - patch:
        offs.append(length - patch)
    return offs


def tile_raster(tile: RasterTile | tuple[int, int], patch: int, stride: int | None = None,
                tile_id: str = "tile") -> list[PatchRef]:
    """Enumerate square patches covering the tile.

    The final row/column offset is clamped so the last patch ends exactly at
    the border; it may overlap its neighbour.
    """
    stride = patch if stride is None else stride
    h, w = tile.shape if isinstance(tile, RasterTile) else tile
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than tile {h}x{w}")
    if stride < 1 or stride > patch:
        raise ValueError(f"stride must be in [1, patch], got {stride}")
    return [PatchRef(tile_id, r, c, patch)
            for r in _axis_offsets(h, patch, stride) for c in _axis_offsets(w, patch, stride)]


def _overlap_groups(descriptors: Sequence[PatchRef]) -> list[list[int]]:
    """Group patch indices whose pixel extents overlap (transitively)."""
    parent = list(range(len(descriptors)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    by_tile: dict[str, list[int]] = {}
    for i, p in enumerate(descriptors):
        by_tile.setdefault(p.tile_id, []).append(i)
    for idx in by_tile.values():
        for a_pos, i in enumerate(idx):
            pi = descriptors[i]
            for j in idx[a_pos + 1:]:
                pj = descriptors[j]
                if (pi.row < pj.row + pj.size and pj.row < pi.row + pi.size
                        and pi.col < pj.col + pj.size and pj.col < pi.col + pi.size):
                    parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(len(descriptors)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def split_dataset(descriptors: Sequence[PatchRef], fractions=(0.8, 0.2), seed: int = 0) -> DatasetSplit:
    """Randomly assign whole patches to train/val(/test remainder).

    Overlapping patches (from border clamping) always land in the same
    subset, so the subsets are disjoint in pixel extent.
    """
    f_train, f_val = fractions
    if f_train < 0 or f_val < 0 or f_train + f_val > 1 + 1e-12:
        raise ValueError(f"invalid split fractions {fractions}")
    n = len(descriptors)
    groups = _overlap_groups(descriptors)
    order = np.random.default_rng(seed).permutation(len(groups))
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n)) if f_train + f_val < 1 else n - n_train
    train, val, test = [], [], []
    for gi in order:
        members = [descriptors[i] for i in groups[gi]]
        if len(train) < n_train:
            train.extend(members)
        elif len(val) < n_val:
            val.extend(members)
        else:
            test.extend(members)
    return DatasetSplit(sorted(train), sorted(val), sorted(test), seed)


@dataclass
class TileEntry:
    tile_id: str
    image: str
    shape: tuple[int, int]
    geo_transform: tuple[float, ...]
    crs_id: str
    truth: str | None = None


@dataclass
class Manifest:
    """JSON-serialisable description of one prepared dataset."""

    tiles: list[TileEntry]
    points: list[str]
    polygons: list[str]
    class_specs: list[ClassSpec]
    split: DatasetSplit
    seed: int
    patch: int
    aoi: tuple[float, float, float, float] | None = None
    test_tiles: list[str] = field(default_factory=list)
    tag_filter: dict[str, Any] = field(default_factory=lambda: {"natural": "tree"})
    root: Path | None = None

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def tile(self, tile_id: str) -> TileEntry:
        for t in self.tiles:
            if t.tile_id == tile_id:
                return t
        raise KeyError(tile_id)

    def to_json(self) -> dict:
        return {
            "tiles": [asdict(t) for t in self.tiles],
            "points": self.points,
            "polygons": self.polygons,
            "class_specs": [asdict(s) for s in self.class_specs],
            "split": self.split.to_json(),
            "seed": self.seed,
            "patch": self.patch,
            "aoi": list(self.aoi) if self.aoi else None,
            "test_tiles": self.test_tiles,
            "tag_filter": self.tag_filter,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        d = json.loads(path.read_text())
        tiles = [TileEntry(t["tile_id"], t["image"], tuple(t["shape"]), tuple(t["geo_transform"]),
                           t["crs_id"], t.get("truth")) for t in d["tiles"]]
        specs = [ClassSpec(s["name"], s["tags"], s["buffer_m"], s.get("area_only", True))
                 for s in d["class_specs"]]
        return cls(tiles, d["points"], d["polygons"], specs, DatasetSplit.from_json(d["split"]),
                   d["seed"], d["patch"], tuple(d["aoi"]) if d.get("aoi") else None,
                   d.get("test_tiles", []), d.get("tag_filter", {"natural": "tree"}), path.parent)


def _relpath(p: Path, root: Path) -> str:
    try:
        return os.path.relpath(p.resolve(), root.resolve())
    except ValueError:
        return str(p.resolve())


def build_manifest(raster_paths: Iterable, tree_paths: Iterable, polygon_paths: Iterable, out,
                   aoi=None, patch: int = 300, fractions=(0.8, 0.2), seed: int = 0,
                   class_specs: Sequence[ClassSpec] = DEFAULT_CLASS_SPECS,
                   test_rasters: Iterable = (), truth_paths: dict[str, str] | None = None) -> Manifest:
    """Tile the training rasters, split their patches and write ``out``.

    Rasters in ``test_rasters`` are recorded as separate test extents and
    are never split.
    """
    out = Path(out)
    root = out.parent
    truth_paths = truth_paths or {}
    tiles, descriptors, test_ids = [], [], []
    for is_test, paths in ((False, raster_paths), (True, test_rasters)):
        for p in sorted(Path(x) for x in paths):
            tile = load_raster(p)
            tile_id = p.stem
            truth = truth_paths.get(tile_id)
            tiles.append(TileEntry(tile_id, _relpath(p, root), tuple(tile.shape),
                                   tile.geo_transform.to_gdal(), tile.crs_id,
                                   _relpath(Path(truth), root) if truth else None))
            if is_test:
                test_ids.append(tile_id)
            else:
                descriptors.extend(tile_raster(tile, patch, patch, tile_id))
    split = split_dataset(descriptors, fractions, seed)
    manifest = Manifest(tiles, [_relpath(Path(p), root) for p in tree_paths],
                        [_relpath(Path(p), root) for p in polygon_paths], list(class_specs), split,
                        seed, patch, tuple(aoi) if aoi else None, test_ids, root=root)
    manifest.save(out)
    return manifest
