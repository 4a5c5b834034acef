import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from weakcanopy.geoio import GeoTransform, load_raster, read_array, write_geotiff, write_png
from weakcanopy.ingest import (
    DEFAULT_CLASS_SPECS,
    Manifest,
    PatchRef,
    build_manifest,
    load_points,
    load_polygons,
    split_dataset,
    tile_raster,
)

T = GeoTransform.from_origin(560000.0, 5936000.0, 0.2)


def _feature(geom_type, coords, **props):
    return {"type": "Feature", "geometry": {"type": geom_type, "coordinates": coords}, "properties": props}


def _write_fc(path, feats, crs=None):
    fc = {"type": "FeatureCollection", "features": feats}
    if crs:
        fc["crs"] = {"type": "name", "properties": {"name": crs}}
    path.write_text(json.dumps(fc))
    return path


def test_png_with_world_file_roundtrip(tmp_path):
    arr = np.arange(4 * 5 * 3, dtype=np.uint8).reshape(4, 5, 3)
    write_png(tmp_path / "a.png", arr, T, "EPSG:32632")
    tile = load_raster(tmp_path / "a.png")
    assert tile.shape == (4, 5) and tile.channels == 3
    assert tile.resolution == pytest.approx(0.2)
    assert tile.crs_id == "EPSG:32632"
    np.testing.assert_allclose(tile.pixels, arr / 255.0, atol=1e-7)
    for a, b in zip(tile.geo_transform.to_gdal(), T.to_gdal()):
        assert a == pytest.approx(b, abs=1e-9)


def test_single_pixel_max_value(tmp_path):
    write_png(tmp_path / "one.png", np.array([[255]], np.uint8), T)
    assert load_raster(tmp_path / "one.png").pixels.tolist() == [[[1.0]]]


def test_missing_georeferencing(tmp_path):
    Image.fromarray(np.zeros((3, 3), np.uint8)).save(tmp_path / "bare.png")
    with pytest.raises(ValueError, match="no geo_transform"):
        load_raster(tmp_path / "bare.png")


def test_unsupported_channels(tmp_path):
    write_geotiff(tmp_path / "six.tif", np.zeros((4, 4, 6), np.uint8), T)
    with pytest.raises(ValueError, match="channel"):
        load_raster(tmp_path / "six.tif")


def test_geotiff_roundtrip(tmp_path):
    arr = (np.random.default_rng(0).random((20, 30, 3)) * 65535).astype(np.uint16)
    write_geotiff(tmp_path / "t.tif", arr, T, "EPSG:32632")
    (tmp_path / "t.crs").unlink()
    tile = load_raster(tmp_path / "t.tif")
    assert tile.crs_id == "EPSG:32632"
    assert tile.geo_transform == T
    np.testing.assert_allclose(tile.pixels, arr / 65535.0, atol=1e-6)


def test_geotiff_float_and_rotated(tmp_path):
    rot = GeoTransform(100.0, 0.2, 0.05, 200.0, 0.05, -0.2)
    data = np.random.default_rng(1).random((5, 6)).astype(np.float32)
    write_geotiff(tmp_path / "f.tif", data, rot)
    arr, t, _ = read_array(tmp_path / "f.tif")
    assert t == rot
    np.testing.assert_array_equal(arr, data)


def test_paper_tile_dimensions(tmp_path):
    # a 3-channel 5000x5000 tile at 0.2 m/px
    write_geotiff(tmp_path / "big.tif", np.zeros((5000, 5000, 3), np.uint8), T)
    tile = load_raster(tmp_path / "big.tif")
    assert tile.shape == (5000, 5000) and tile.channels == 3 and tile.resolution == pytest.approx(0.2)


@given(st.floats(0, 4999), st.floats(0, 4999))
def test_world_pixel_roundtrip(col, row):
    x, y = T.to_world(col, row)
    c2, r2 = T.to_pixel(x, y)
    x2, y2 = T.to_world(c2, r2)
    assert abs(x2 - x) < 1e-6 and abs(y2 - y) < 1e-6


def test_world_file_text_roundtrip():
    t = GeoTransform(10.0, 0.5, 0.1, 20.0, -0.1, -0.5)
    back = GeoTransform.from_world_file(t.to_world_file())
    for a, b in zip(back.to_gdal(), t.to_gdal()):
        assert a == pytest.approx(b, abs=1e-12)


def test_load_points_filter(tmp_path):
    feats = [_feature("Point", [i, i], natural="tree") for i in range(3)]
    feats += [_feature("Point", [9, 9], amenity="bench") for _ in range(2)]
    pts = load_points(_write_fc(tmp_path / "p.geojson", feats), {"natural": "tree"})
    assert len(pts) == 3


def test_load_points_empty(tmp_path):
    assert len(load_points(_write_fc(tmp_path / "e.geojson", []), {"natural": "tree"})) == 0


def test_load_points_aoi_matches_bruteforce(tmp_path, rng):
    xy = rng.uniform(0, 100, size=(200, 2))
    feats = [_feature("Point", [float(x), float(y)], natural="tree") for x, y in xy]
    aoi = (20.0, 30.0, 70.0, 90.0)
    pts = load_points(_write_fc(tmp_path / "p.geojson", feats), {"natural": "tree"}, aoi=aoi)
    want = [(x, y) for x, y in xy if aoi[0] <= x <= aoi[2] and aoi[1] <= y <= aoi[3]]
    assert [(p.x, p.y) for p in pts.points] == want


def test_load_points_rejects_bad_records(tmp_path, caplog):
    feats = [_feature("Point", [1, 2], natural="tree"), _feature("Point", ["a", 2], natural="tree"),
             {"type": "Feature", "geometry": None, "properties": {"natural": "tree"}}]
    pts = load_points(_write_fc(tmp_path / "p.geojson", feats), {"natural": "tree"})
    assert len(pts) == 1 and pts.rejected == 2


def test_load_points_csv(tmp_path):
    (tmp_path / "t.csv").write_text("x,y,natural\n1,2,tree\n3,4,bench\nfoo,5,tree\n")
    pts = load_points(tmp_path / "t.csv", {"natural": "tree"})
    assert [(p.x, p.y) for p in pts.points] == [(1.0, 2.0)] and pts.rejected == 1


def test_load_points_crs_mismatch(tmp_path):
    path = _write_fc(tmp_path / "p.geojson", [], crs="EPSG:4326")
    with pytest.raises(ValueError, match="reproject"):
        load_points(path, crs_id="EPSG:32632")


def test_load_points_source_tag(tmp_path):
    with pytest.raises(ValueError):
        load_points(_write_fc(tmp_path / "p.geojson", []), source="lidar")


def _square(x, y, s):
    return [[[x, y], [x + s, y], [x + s, y + s], [x, y + s], [x, y]]]


def test_load_polygons_default_classes(tmp_path):
    feats = [_feature("Polygon", _square(0, 0, 20), building="yes"),
             _feature("Polygon", _square(30, 0, 20), building="house"),
             _feature("LineString", [[0, 0], [50, 0]], highway="residential")]
    layers = load_polygons(_write_fc(tmp_path / "b.geojson", feats))
    assert [len(layer) for layer, _ in layers] == [2, 0, 0]
    assert [buf for _, buf in layers] == [-5.0, -7.0, -7.0]


def test_load_polygons_empty_file(tmp_path):
    (tmp_path / "e.geojson").write_text("")
    layers = load_polygons(tmp_path / "e.geojson")
    assert len(layers) == 3 and all(len(layer) == 0 for layer, _ in layers)


def test_self_intersecting_polygon_repaired(tmp_path):
    bowtie = [[[0, 0], [10, 10], [10, 0], [0, 10], [0, 0]]]
    layers = load_polygons(_write_fc(tmp_path / "b.geojson", [_feature("Polygon", bowtie, building="yes")]))
    (layer, _), = layers[:1]
    assert len(layer) == 1
    geom = layer.geometries[0]
    assert geom.is_valid and geom.area == pytest.approx(50.0)


def test_degenerate_polygon_dropped(tmp_path):
    flat = [[[0, 0], [10, 0], [5, 0], [0, 0]]]
    layers = load_polygons(_write_fc(tmp_path / "b.geojson", [_feature("Polygon", flat, building="yes")]))
    assert len(layers[0][0]) == 0 and layers[0][0].rejected == 1


def test_tile_offsets_paper_size():
    refs = tile_raster((5000, 5000), 300, 300)
    assert len(refs) == 17 * 17
    offs = sorted({r.row for r in refs})
    assert offs == list(range(0, 4800, 300)) + [4700]


def test_tile_single_patch_and_error():
    assert tile_raster((300, 300), 300) == [PatchRef("tile", 0, 0, 300)]
    with pytest.raises(ValueError):
        tile_raster((200, 200), 300)


@given(st.integers(1, 80), st.integers(1, 80), st.integers(1, 40), st.integers(1, 40))
def test_patches_cover_tile(h, w, patch, stride):
    if patch > min(h, w) or stride > patch:
        return
    cover = np.zeros((h, w), bool)
    for ref in tile_raster((h, w), patch, stride):
        assert ref.row + patch <= h and ref.col + patch <= w
        cover[ref.row:ref.row + patch, ref.col:ref.col + patch] = True
    assert cover.all()


def test_split_sizes_and_determinism():
    refs = tile_raster((1000, 1000), 100)
    a = split_dataset(refs, (0.8, 0.2), seed=7)
    b = split_dataset(refs, (0.8, 0.2), seed=7)
    assert len(a.train_patches) == 80 and len(a.val_patches) == 20
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    assert split_dataset(refs, (0.8, 0.2), seed=8).to_json() != a.to_json()


def test_split_keeps_overlapping_patches_together():
    refs = tile_raster((1000, 1000), 300)  # clamped last row/col overlap
    s = split_dataset(refs, (0.6, 0.4), seed=1)
    for a in s.train_patches:
        for b in s.val_patches:
            if a.tile_id == b.tile_id:
                overlap = (a.row < b.row + b.size and b.row < a.row + a.size
                           and a.col < b.col + b.size and b.col < a.col + a.size)
                assert not overlap


def test_paper_split_counts_format():
    # 3566 training and 788 validation patches as a formatting reference
    assert f"{3566:d} train / {788:d} val" == "3566 train / 788 val"


def test_manifest_roundtrip(tmp_path):
    write_png(tmp_path / "t1.png", np.zeros((128, 128, 3), np.uint8), T, "EPSG:32632")
    _write_fc(tmp_path / "trees.geojson", [])
    _write_fc(tmp_path / "poly.geojson", [])
    m = build_manifest([tmp_path / "t1.png"], [tmp_path / "trees.geojson"], [tmp_path / "poly.geojson"],
                       tmp_path / "out" / "manifest.json", patch=64, seed=3)
    back = Manifest.load(tmp_path / "out" / "manifest.json")
    assert back.to_json() == m.to_json()
    assert back.path(back.tiles[0].image).resolve() == (tmp_path / "t1.png").resolve()
    assert len(back.split.train_patches) + len(back.split.val_patches) == 4
    assert [s.name for s in back.class_specs] == [s.name for s in DEFAULT_CLASS_SPECS]
