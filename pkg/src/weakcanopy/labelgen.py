"""Tri-state label rasters and auxiliary masks from points and polygons."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Polygon

from .geoio import GeoTransform
from .ingest import PolygonLayer, repair_polygon

UNKNOWN, NEG, POS = 0, 1, 2
LABEL_PALETTE = [(0, 0, 0), (220, 40, 40), (40, 200, 40)]

# Pixel-unit slack so 0.6 m / 0.2 m-per-px counts as exactly 3 px.
_EPS_PX = 1e-6


@dataclass(frozen=True)
class Grid:
    """Pixel lattice a label or mask raster lives on."""

    shape: tuple[int, int]
    transform: GeoTransform
    crs_id: str = "unknown"

    @property
    def resolution(self) -> float:
        return self.transform.resolution

    def window(self, row: int, col: int, size: int) -> "Grid":
        return Grid((size, size), self.transform.window(row, col), self.crs_id)


def buffer_polygon(geom, distance_m: float):
    """Offset a polygon by ``distance_m`` (negative shrinks).

    Returns ``None`` when nothing with positive area survives.
    """
    if geom is None or geom.is_empty:
        return None
    out = geom.buffer(distance_m, join_style="round") if distance_m else geom
    return repair_polygon(out)


def buffer_layers(layers: Iterable[tuple[PolygonLayer, float]]) -> list:
    geoms = []
    for layer, dist in layers:
        for g in layer.geometries:
            b = buffer_polygon(g, dist)
            if b is not None:
                geoms.append(b)
    return geoms


def _polygon_pixel_bounds(geom, grid: Grid):
    minx, miny, maxx, maxy = geom.bounds
    cols, rows = grid.transform.to_pixel([minx, minx, maxx, maxx], [miny, maxy, miny, maxy])
    h, w = grid.shape
    r0 = max(int(np.floor(rows.min())) - 1, 0)
    r1 = min(int(np.ceil(rows.max())) + 1, h)
    c0 = max(int(np.floor(cols.min())) - 1, 0)
    c1 = min(int(np.ceil(cols.max())) + 1, w)
    return r0, r1, c0, c1


def rasterize_polygons(geoms: Sequence[Polygon | MultiPolygon], grid: Grid) -> np.ndarray:
    """Boolean mask of pixels whose centers fall strictly inside any polygon."""
    mask = np.zeros(grid.shape, dtype=bool)
    for geom in geoms:
        if geom is None or geom.is_empty:
            continue
        r0, r1, c0, c1 = _polygon_pixel_bounds(geom, grid)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        xs, ys = grid.transform.to_world(cc + 0.5, rr + 0.5)
        shapely.prepare(geom)
        mask[r0:r1, c0:c1] |= shapely.contains_xy(geom, xs, ys)
    return mask


def points_to_pixels(xy: np.ndarray, grid: Grid) -> np.ndarray:
    """Continuous pixel coordinates ``(col, row)`` for world points, shape (n, 2)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    cols, rows = grid.transform.to_pixel(xy[:, 0], xy[:, 1])
    return np.stack([cols, rows], axis=1)


def point_pixels(xy: np.ndarray, grid: Grid) -> np.ndarray:
    """Integer ``(row, col)`` of the pixel containing each point; out-of-grid rows dropped."""
    pc = points_to_pixels(xy, grid)
    rc = np.floor(pc[:, ::-1]).astype(np.int64)
    h, w = grid.shape
    keep = (rc[:, 0] >= 0) & (rc[:, 0] < h) & (rc[:, 1] >= 0) & (rc[:, 1] < w)
    return rc[keep]


def rasterize_points(xy: np.ndarray, grid: Grid) -> np.ndarray:
    """Mask with only the pixel containing each point set."""
    mask = np.zeros(grid.shape, dtype=bool)
    rc = point_pixels(xy, grid)
    mask[rc[:, 0], rc[:, 1]] = True
    return mask


def expand_points(xy: np.ndarray, radius_m: float, grid: Grid, shape: str = "disk") -> np.ndarray:
    """Mask of pixels near any point.

    ``disk``: pixel center within ``radius_m`` of the point.
    ``square``: the (2k+1)x(2k+1) block centred on the point's pixel, with
    k = round(radius_m / resolution); 0.6 m at 0.2 m/px gives 7x7.
    """
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    if shape not in ("disk", "square"):
        raise ValueError(f"unknown shape {shape!r}")
    h, w = grid.shape
    mask = np.zeros((h, w), dtype=bool)
    r_px = radius_m / grid.resolution
    if shape == "square":
        k = int(round(r_px))
        for row, col in np.floor(points_to_pixels(xy, grid)[:, ::-1]).astype(np.int64):
            mask[max(row - k, 0): max(row + k + 1, 0), max(col - k, 0): max(col + k + 1, 0)] = True
        return mask
    reach = int(np.ceil(r_px)) + 1
    lim = r_px * r_px + _EPS_PX
    for pc, pr in points_to_pixels(xy, grid):
        r0, r1 = max(int(np.floor(pr)) - reach, 0), min(int(np.floor(pr)) + reach + 1, h)
        c0, c1 = max(int(np.floor(pc)) - reach, 0), min(int(np.floor(pc)) + reach + 1, w)
        if r0 >= r1 or c0 >= c1:
            continue
        dr = (np.arange(r0, r1) + 0.5 - pr)[:, None]
        dc = (np.arange(c0, c1) + 0.5 - pc)[None, :]
        mask[r0:r1, c0:c1] |= dr * dr + dc * dc <= lim
    return mask


def compose_label_raster(tree_mask: np.ndarray, objects: np.ndarray, disk: np.ndarray) -> np.ndarray:
    """Tri-state labels: POS on trees, NEG on objects away from trees, else UNKNOWN."""
    tree_mask, objects, disk = (np.asarray(a, dtype=bool) for a in (tree_mask, objects, disk))
    if not (tree_mask.shape == objects.shape == disk.shape):
        raise ValueError(f"shape mismatch: {tree_mask.shape}, {objects.shape}, {disk.shape}")
    y = np.full(tree_mask.shape, UNKNOWN, dtype=np.uint8)
    y[objects & ~disk] = NEG
    y[tree_mask] = POS
    return y


@dataclass
class LabelSet:
    """Everything label-related for one tile."""

    y: np.ndarray  # training labels (7x7 positives)
    y_eval: np.ndarray  # raw point pixels as positives
    objects: np.ndarray  # O
    disk: np.ndarray  # D
    points_rc: np.ndarray  # marker pixels (row, col)


def build_labels(points_xy: np.ndarray, layers, grid: Grid, tree_radius_m: float = 0.6,
                 disk_radius_m: float = 1.5, tree_shape: str = "square") -> LabelSet:
    geoms = buffer_layers(layers)
    objects = rasterize_polygons(geoms, grid)
    disk = expand_points(points_xy, disk_radius_m, grid, "disk")
    tree = expand_points(points_xy, tree_radius_m, grid, tree_shape)
    raw = rasterize_points(points_xy, grid)
    return LabelSet(
        y=compose_label_raster(tree, objects, disk),
        y_eval=compose_label_raster(raw, objects, disk),
        objects=objects,
        disk=disk,
        points_rc=point_pixels(points_xy, grid),
    )
