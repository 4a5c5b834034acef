"""On-disk layout for label rasters and per-patch objectness bundles.

Label rasters are palette PNGs (tri-state) and 1-bit PNGs (masks), each
with a world file.  Objectness is computed per patch, so bundles are kept
as page stacks in the tiling order listed in ``patches.json``: delta and o
as float32, regions as uint16, boundaries as 1-bit.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import tifffile

from .geoio import GeoTransform, read_array, write_png
from .ingest import PatchRef
from .labelgen import LABEL_PALETTE, LabelSet
from .objectness import ObjectnessBundle


def file_digest(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def save_labels(labels: LabelSet, out_dir, transform: GeoTransform, crs_id: str | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "y.png", labels.y, transform, crs_id, palette=LABEL_PALETTE)
    write_png(out / "y_eval.png", labels.y_eval, transform, crs_id, palette=LABEL_PALETTE)
    write_png(out / "objects.png", labels.objects, transform, crs_id, bilevel=True)
    write_png(out / "disk.png", labels.disk, transform, crs_id, bilevel=True)
    (out / "points.json").write_text(json.dumps({"points_rc": labels.points_rc.tolist()}) + "\n")
    return out


def load_labels(label_dir) -> LabelSet:
    d = Path(label_dir)
    y, _, _ = read_array(d / "y.png")
    y_eval, _, _ = read_array(d / "y_eval.png")
    objects, _, _ = read_array(d / "objects.png")
    disk, _, _ = read_array(d / "disk.png")
    rc = json.loads((d / "points.json").read_text())["points_rc"]
    return LabelSet(np.asarray(y, np.uint8), np.asarray(y_eval, np.uint8), np.asarray(objects, bool),
                    np.asarray(disk, bool), np.asarray(rc, dtype=np.int64).reshape(-1, 2))


def save_patch_bundles(out_dir, refs: Sequence[PatchRef], bundles: Sequence[ObjectnessBundle]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not bundles:
        raise ValueError("no bundles to save")
    alpha = bundles[0].alpha
    stacks = {
        "delta": np.stack([b.delta for b in bundles]).astype(np.float32),
        "o": np.stack([b.o for b in bundles]).astype(np.float32),
        "regions": np.stack([b.regions for b in bundles]).astype(np.uint16),
        "boundaries": np.stack([b.boundaries for b in bundles]).astype(bool),
    }
    for name, arr in stacks.items():
        # one page per patch, never interpreted as colour planes
        tifffile.imwrite(out / f"{name}.tif", arr, photometric="minisblack")
    (out / "patches.json").write_text(json.dumps({"alpha": alpha, "patches": [list(r) for r in refs]}) + "\n")
    return out


def load_patch_bundles(bundle_dir) -> tuple[list[PatchRef], list[ObjectnessBundle]]:
    d = Path(bundle_dir)
    meta = json.loads((d / "patches.json").read_text())
    refs = [PatchRef(str(t), int(r), int(c), int(s)) for t, r, c, s in meta["patches"]]
    stacks = {}
    for name in ("delta", "o", "regions", "boundaries"):
        arr = tifffile.imread(d / f"{name}.tif")
        stacks[name] = arr.reshape((len(refs),) + arr.shape[-2:])
    bundles = [ObjectnessBundle(stacks["delta"][i], stacks["o"][i], stacks["regions"][i],
                                stacks["boundaries"][i].astype(bool), meta["alpha"]) for i in range(len(refs))]
    return refs, bundles
