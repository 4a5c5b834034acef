"""Stacked per-patch arrays that feed training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .ingest import PatchRef
from .labelgen import POS, LabelSet
from .maskgen import ScenarioConfig, build_masks
from .objectness import ObjectnessBundle, compute_objectness


@dataclass
class PatchArrays:
    """Aligned stacks over N patches of size p (channels-first images)."""

    refs: list[PatchRef]
    images: np.ndarray  # (N, c, p, p) float32
    y: np.ndarray  # (N, p, p) uint8 tri-state training labels
    y_eval: np.ndarray  # (N, p, p) uint8 tri-state labels with raw point pixels
    objects: np.ndarray  # (N, p, p) bool
    disk: np.ndarray  # (N, p, p) bool
    o: np.ndarray | None = None  # (N, p, p) float32
    regions: np.ndarray | None = None  # (N, p, p) uint16
    boundaries: np.ndarray | None = None  # (N, p, p) bool
    truth: np.ndarray | None = None  # (N, p, p) bool dense ground truth

    def __len__(self):
        return len(self.refs)

    @property
    def has_objectness(self) -> bool:
        return self.regions is not None

    def bundle(self, i: int) -> ObjectnessBundle | None:
        if not self.has_objectness:
            return None
        return ObjectnessBundle(np.zeros_like(self.o[i]), self.o[i], self.regions[i], self.boundaries[i])

    @classmethod
    def concat(cls, parts: Sequence["PatchArrays"]) -> "PatchArrays":
        kw = {"refs": [r for p in parts for r in p.refs]}
        for f in fields(cls):
            if f.name == "refs":
                continue
            vals = [getattr(p, f.name) for p in parts]
            kw[f.name] = None if any(v is None for v in vals) else np.concatenate(vals)
        return cls(**kw)


def patch_markers(points_rc: np.ndarray, ref: PatchRef) -> np.ndarray:
    """Point pixels falling inside ``ref``, in patch coordinates."""
    pr = np.asarray(points_rc).reshape(-1, 2)
    r, c, s = ref.row, ref.col, ref.size
    inside = (pr[:, 0] >= r) & (pr[:, 0] < r + s) & (pr[:, 1] >= c) & (pr[:, 1] < c + s)
    return pr[inside] - [r, c]


def patch_bundles(pixels: np.ndarray, points_rc: np.ndarray, refs: Sequence[PatchRef], alpha: float = 10.0,
                  step_cost: float = 0.01, connectivity: int = 4, normalize: bool = True) -> list[ObjectnessBundle]:
    """One objectness bundle per patch, seeded by the markers inside that patch."""
    out = []
    for ref in refs:
        win = pixels[ref.row:ref.row + ref.size, ref.col:ref.col + ref.size]
        out.append(compute_objectness(win, patch_markers(points_rc, ref), alpha, step_cost, connectivity, normalize))
    return out


def extract_patches(pixels: np.ndarray, labels: LabelSet, refs: Sequence[PatchRef], truth=None,
                    objectness: bool = False, alpha: float = 10.0, step_cost: float = 0.01,
                    connectivity: int = 4, normalize: bool = True,
                    bundles: Sequence[ObjectnessBundle] | None = None) -> PatchArrays:
    """Cut patches from one tile.

    Objectness comes from ``bundles`` when given (aligned with ``refs``),
    otherwise it is computed per patch from that patch's own markers.
    """
    if bundles is None and objectness:
        bundles = patch_bundles(pixels, labels.points_rc, refs, alpha, step_cost, connectivity, normalize)
    if bundles is not None and len(bundles) != len(refs):
        raise ValueError("bundles and patch refs differ in length")
    imgs, y, ye, ob, dk, tr = [], [], [], [], [], []
    for ref in refs:
        r, c, s = ref.row, ref.col, ref.size
        win = (slice(r, r + s), slice(c, c + s))
        imgs.append(np.moveaxis(pixels[win], -1, 0))
        y.append(labels.y[win])
        ye.append(labels.y_eval[win])
        ob.append(labels.objects[win])
        dk.append(labels.disk[win])
        if truth is not None:
            tr.append(truth[win])
    stack = lambda xs, dt: np.stack(xs).astype(dt) if xs else None
    o = [b.o for b in bundles] if bundles else []
    reg = [b.regions for b in bundles] if bundles else []
    bnd = [b.boundaries for b in bundles] if bundles else []
    return PatchArrays(
        list(refs), np.stack(imgs).astype(np.float32), np.stack(y), np.stack(ye), np.stack(ob), np.stack(dk),
        stack(o, np.float32), stack(reg, np.uint16), stack(bnd, bool), stack(tr, bool),
    )


@dataclass
class ScenarioArrays:
    labels: np.ndarray  # (N, p, p) float32 in {0, 1}
    m: np.ndarray  # (N, p, p) bool
    m_r: np.ndarray  # (N, p, p) bool
    effective: np.ndarray  # (N, p, p) uint8 tri-state


def apply_scenario(data: PatchArrays, scenario: ScenarioConfig) -> ScenarioArrays:
    labels, ms, mrs, effs = [], [], [], []
    for i in range(len(data)):
        masks, eff = build_masks(scenario, data.y[i], data.objects[i], data.disk[i], data.bundle(i))
        effs.append(eff)
        labels.append(eff == POS)
        ms.append(masks.m)
        mrs.append(masks.m_r)
    return ScenarioArrays(np.stack(labels).astype(np.float32), np.stack(ms), np.stack(mrs), np.stack(effs))
