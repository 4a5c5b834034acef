"""Watershed instance regions and the objectness prior derived from them.

Markers (tree points) flood the patch along minimum-cost paths.  A step
between neighbouring pixels costs the Euclidean colour difference plus a
spatial term, so objectness falls off with both distance and colour change.
Costs are accumulated as integers (units of 2**-32) which makes path sums
exact and the lowest-id tie-break independent of traversal order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _core

DEFAULT_ALPHA = 10.0
DEFAULT_STEP_COST = 0.01


@dataclass
class ObjectnessBundle:
    delta: np.ndarray  # float32 path cost
    o: np.ndarray  # float32 in [0, 1]
    regions: np.ndarray  # uint16 instance ids, 0 = none
    boundaries: np.ndarray  # bool
    alpha: float = DEFAULT_ALPHA

    @classmethod
    def empty(cls, shape, alpha: float = DEFAULT_ALPHA) -> "ObjectnessBundle":
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32),
                   np.zeros(shape, np.uint16), np.zeros(shape, bool), alpha)

    @property
    def n_instances(self) -> int:
        return int(len(np.unique(self.regions[self.regions > 0])))


def _as_image(image) -> np.ndarray:
    pixels = getattr(image, "pixels", image)
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected (h, w, c) image, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def watershed_raw(image, markers, step_cost: float = DEFAULT_STEP_COST, connectivity: int = 4,
                  backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Integer path costs (units of 2**-32) and region ids before normalisation."""
    img = _as_image(image)
    mk = np.asarray(markers, dtype=np.int64).reshape(-1, 2)
    if len(mk) == 0:
        raise ValueError("watershed needs at least one marker")
    h, w = img.shape[:2]
    if (mk[:, 0] < 0).any() or (mk[:, 0] >= h).any() or (mk[:, 1] < 0).any() or (mk[:, 1] >= w).any():
        raise ValueError("marker outside the image")
    if step_cost < 0:
        raise ValueError("step_cost must be non-negative")
    flood = {"python": _core.flood_python, None: _core.flood}.get(backend, _core.flood)
    return flood(img, mk, float(step_cost), int(connectivity))


def watershed_assign(image, markers, step_cost: float = DEFAULT_STEP_COST, connectivity: int = 4,
                     normalize: bool = True, backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Assign every pixel to the marker with the cheapest path.

    Returns ``(delta, regions)``: ``delta`` is the minimal path cost, divided
    by the patch diagonal in pixels when ``normalize``; ``regions`` holds
    1-based marker ids (ties go to the lower id).
    """
    dist, labels = watershed_raw(image, markers, step_cost, connectivity, backend)
    delta = dist.astype(np.float64) / _core.COST_SCALE
    if normalize:
        h, w = labels.shape
        delta /= float(np.hypot(h, w))
    return delta, labels


def distances_to_objectness(delta, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Pseudo-probability ``exp(-alpha * delta**2)`` clipped to [0, 1]."""
    delta = np.asarray(delta, dtype=np.float64)
    if (delta < 0).any():
        raise ValueError("delta must be non-negative")
    return np.clip(np.exp(-alpha * delta * delta), 0.0, 1.0)


def derive_boundaries(regions) -> np.ndarray:
    """Pixels with a 4-neighbour carrying a different non-zero instance id."""
    reg = np.asarray(regions)
    out = np.zeros(reg.shape, dtype=bool)
    for a, b, sa, sb in (
        (reg[:, :-1], reg[:, 1:], (slice(None), slice(None, -1)), (slice(None), slice(1, None))),
        (reg[:-1, :], reg[1:, :], (slice(None, -1), slice(None)), (slice(1, None), slice(None))),
    ):
        diff = (a != b) & (a > 0) & (b > 0)
        out[sa] |= diff
        out[sb] |= diff
    return out


def compute_objectness(image, markers, alpha: float = DEFAULT_ALPHA, step_cost: float = DEFAULT_STEP_COST,
                       connectivity: int = 4, normalize: bool = True) -> ObjectnessBundle:
    """Full bundle for one patch; a patch without markers gets an all-zero bundle."""
    img = _as_image(image)
    markers = np.asarray(markers, dtype=np.int64).reshape(-1, 2)
    if len(markers) == 0:
        return ObjectnessBundle.empty(img.shape[:2], alpha)
    delta, regions = watershed_assign(img, markers, step_cost, connectivity, normalize)
    o = distances_to_objectness(delta, alpha)
    o[regions == 0] = 0.0
    return ObjectnessBundle(delta.astype(np.float32), o.astype(np.float32), regions.astype(np.uint16),
                            derive_boundaries(regions), alpha)
