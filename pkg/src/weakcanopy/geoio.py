"""Georeferenced raster I/O.

Two on-disk forms are supported: GeoTIFF (georeferencing in the standard
ModelPixelScale/ModelTiepoint or ModelTransformation tags) and any image
format with an ESRI world-file sidecar (``.pgw``, ``.tfw``, ``.wld``, ...).
The CRS is carried as an opaque text id; no reprojection is done here.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

log = logging.getLogger(__name__)

_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_TRANSFORMATION = 34264
_TAG_GEOKEYS = 34735
_KEY_PROJECTED_CS = 3072
_KEY_GEOGRAPHIC_CS = 2048

_WORLD_SUFFIXES = {
    ".png": (".pgw", ".pngw"),
    ".jpg": (".jgw", ".jpgw"),
    ".jpeg": (".jgw", ".jpegw"),
    ".tif": (".tfw", ".tifw"),
    ".tiff": (".tfw", ".tiffw"),
}


@dataclass(frozen=True)
class GeoTransform:
    """Affine map from continuous pixel coordinates (col, row) to world (x, y).

    Coefficients follow the GDAL ordering: ``x = x0 + col*a + row*b`` and
    ``y = y0 + col*d + row*e``.  Pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``
    so its center is at ``(c + 0.5, r + 0.5)``.
    """

    x0: float
    a: float
    b: float
    y0: float
    d: float
    e: float

    @classmethod
    def from_origin(cls, x0: float, y0: float, resolution: float) -> "GeoTransform":
        return cls(float(x0), float(resolution), 0.0, float(y0), 0.0, -float(resolution))

    @classmethod
    def from_gdal(cls, coeffs) -> "GeoTransform":
        return cls(*(float(v) for v in coeffs))

    def to_gdal(self) -> tuple[float, ...]:
        return (self.x0, self.a, self.b, self.y0, self.d, self.e)

    @property
    def determinant(self) -> float:
        return self.a * self.e - self.b * self.d

    @property
    def resolution(self) -> float:
        return float(np.sqrt(abs(self.determinant)))

    def to_world(self, col, row):
        col = np.asarray(col, dtype=np.float64)
        row = np.asarray(row, dtype=np.float64)
        return self.x0 + col * self.a + row * self.b, self.y0 + col * self.d + row * self.e

    def to_pixel(self, x, y):
        det = self.determinant
        if det == 0:
            raise ValueError("singular geo_transform")
        dx = np.asarray(x, dtype=np.float64) - self.x0
        dy = np.asarray(y, dtype=np.float64) - self.y0
        col = (self.e * dx - self.b * dy) / det
        row = (-self.d * dx + self.a * dy) / det
        return col, row

    def window(self, row_off: int, col_off: int) -> "GeoTransform":
        """Transform of a sub-window starting at the given pixel offsets."""
        x0, y0 = self.to_world(col_off, row_off)
        return GeoTransform(float(x0), self.a, self.b, float(y0), self.d, self.e)

    # ESRI world files reference the center of the upper-left pixel.
    def to_world_file(self) -> str:
        cx, cy = self.to_world(0.5, 0.5)
        vals = (self.a, self.d, self.b, self.e, float(cx), float(cy))
        return "\n".join(repr(float(v)) for v in vals) + "\n"

    @classmethod
    def from_world_file(cls, text: str) -> "GeoTransform":
        vals = [float(tok) for tok in text.split()]
        if len(vals) != 6:
            raise ValueError(f"world file needs 6 values, got {len(vals)}")
        a, d, b, e, cx, cy = vals
        return cls(cx - 0.5 * a - 0.5 * b, a, b, cy - 0.5 * d - 0.5 * e, d, e)


@dataclass
class RasterTile:
    """Image tile with intensities in [0, 1], shape ``(h, w, c)``."""

    pixels: np.ndarray
    geo_transform: GeoTransform
    crs_id: str = "unknown"

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        h, w, c = self.pixels.shape
        if h <= 0 or w <= 0 or c < 1:
            raise ValueError(f"invalid tile shape {self.pixels.shape}")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def resolution(self) -> float:
        return self.geo_transform.resolution

    def window(self, row: int, col: int, size: int) -> "RasterTile":
        return RasterTile(
            self.pixels[row : row + size, col : col + size],
            self.geo_transform.window(row, col),
            self.crs_id,
        )


def _world_file_candidates(path: Path) -> list[Path]:
    suffixes = _WORLD_SUFFIXES.get(path.suffix.lower(), ()) + (".wld",)
    return [path.with_suffix(s) for s in suffixes]


def _read_crs_sidecar(path: Path) -> str | None:
    side = path.with_suffix(".crs")
    if side.exists():
        return side.read_text().strip() or None
    return None


def _parse_geokeys(values) -> str | None:
    vals = [int(v) for v in values]
    n_keys = vals[3]
    for i in range(n_keys):
        key_id, location, _count, value = vals[4 + 4 * i : 8 + 4 * i]
        if location == 0 and key_id in (_KEY_PROJECTED_CS, _KEY_GEOGRAPHIC_CS) and value not in (0, 32767):
            return f"EPSG:{value}"
    return None


def _tiff_georef(path: Path):
    with tifffile.TiffFile(path) as tif:
        page = tif.pages[0]
        data = page.asarray()
        tags = page.tags
        transform = None
        if _TAG_TRANSFORMATION in tags:
            m = tags[_TAG_TRANSFORMATION].value
            transform = GeoTransform(m[3], m[0], m[1], m[7], m[4], m[5])
        elif _TAG_PIXEL_SCALE in tags and _TAG_TIEPOINT in tags:
            sx, sy = tags[_TAG_PIXEL_SCALE].value[:2]
            i, j, _k, x, y = tags[_TAG_TIEPOINT].value[:5]
            transform = GeoTransform(x - i * sx, sx, 0.0, y + j * sy, 0.0, -sy)
        crs = _parse_geokeys(tags[_TAG_GEOKEYS].value) if _TAG_GEOKEYS in tags else None
        planar = page.planarconfig == tifffile.PLANARCONFIG.SEPARATE and data.ndim == 3
    if planar:
        data = np.moveaxis(data, 0, -1)
    return data, transform, crs


def read_array(path) -> tuple[np.ndarray, GeoTransform, str]:
    """Read raw raster values plus georeferencing, without rescaling.

    Raises ``ValueError`` when neither embedded tags nor a world file give a
    geo_transform.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    transform = crs = None
    if path.suffix.lower() in (".tif", ".tiff"):
        data, transform, crs = _tiff_georef(path)
    else:
        with Image.open(path) as img:
            data = np.asarray(img)
    if transform is None:
        for cand in _world_file_candidates(path):
            if cand.exists():
                transform = GeoTransform.from_world_file(cand.read_text())
                break
    if transform is None:
        raise ValueError(f"{path}: no geo_transform (no GeoTIFF tags and no world file)")
    crs = _read_crs_sidecar(path) or crs or "unknown"
    return data, transform, crs


def load_raster(path, max_channels: int = 4) -> RasterTile:
    """Load an image tile and scale intensities to [0, 1]."""
    data, transform, crs = read_array(path)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3 or not 1 <= data.shape[2] <= max_channels:
        raise ValueError(f"{path}: unsupported channel count (shape {data.shape})")
    if data.dtype == np.bool_:
        pixels = data.astype(np.float32)
    elif np.issubdtype(data.dtype, np.integer):
        pixels = data.astype(np.float32) / np.float32(np.iinfo(data.dtype).max)
    else:
        pixels = data.astype(np.float32)
        if pixels.size and (pixels.min() < 0 or pixels.max() > 1):
            log.warning("%s: float intensities outside [0,1] clipped", path)
            pixels = np.clip(pixels, 0.0, 1.0)
    return RasterTile(pixels, transform, crs)


def _write_crs_sidecar(path: Path, crs_id: str | None):
    if crs_id and crs_id != "unknown":
        path.with_suffix(".crs").write_text(crs_id + "\n")


def write_png(path, array: np.ndarray, transform: GeoTransform, crs_id: str | None = None,
              palette: list[tuple[int, int, int]] | None = None, bilevel: bool = False) -> Path:
    """Write an 8-bit PNG with a world-file sidecar.

    ``palette`` stores a single-channel index image in palette mode;
    ``bilevel`` stores a boolean mask as a 1-bit image.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bilevel:
        img = Image.fromarray(np.asarray(array, dtype=bool))
    elif palette is not None:
        img = Image.fromarray(np.asarray(array, dtype=np.uint8), mode="P")
        flat = [v for rgb in palette for v in rgb]
        img.putpalette(flat + [0] * (768 - len(flat)))
    else:
        arr = np.asarray(array)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        img = Image.fromarray(arr.astype(np.uint8))
    img.save(path, format="PNG")
    path.with_suffix(".pgw").write_text(transform.to_world_file())
    _write_crs_sidecar(path, crs_id)
    return path


def write_geotiff(path, array: np.ndarray, transform: GeoTransform, crs_id: str | None = None) -> Path:
    """Write a GeoTIFF with embedded georeferencing tags."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t = transform
    if t.b == 0 and t.d == 0 and t.a > 0 and t.e < 0:
        extratags = [
            (_TAG_PIXEL_SCALE, "d", 3, (t.a, -t.e, 0.0), False),
            (_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, t.x0, t.y0, 0.0), False),
        ]
    else:
        m = (t.a, t.b, 0.0, t.x0, t.d, t.e, 0.0, t.y0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)
        extratags = [(_TAG_TRANSFORMATION, "d", 16, m, False)]
    if crs_id and crs_id.upper().startswith("EPSG:"):
        code = int(crs_id.split(":", 1)[1])
        key = _KEY_GEOGRAPHIC_CS if code == 4326 else _KEY_PROJECTED_CS
        extratags.append((_TAG_GEOKEYS, "H", 8, (1, 1, 0, 1, key, 0, 1, code), False))
    arr = np.asarray(array)
    photometric = "rgb" if arr.ndim == 3 and arr.shape[2] == 3 else "minisblack"
    planar = "contig" if arr.ndim == 3 else None
    tifffile.imwrite(path, arr, photometric=photometric, planarconfig=planar, extratags=extratags, metadata=None)
    _write_crs_sidecar(path, crs_id)
    return path


def write_raster(path, array: np.ndarray, transform: GeoTransform, crs_id: str | None = None) -> Path:
    """Write by extension: ``.png`` as 8-bit PNG, anything else as GeoTIFF."""
    if Path(path).suffix.lower() == ".png":
        return write_png(path, array, transform, crs_id)
    return write_geotiff(path, array, transform, crs_id)
