"""Learning masks and effective labels for the five ablation scenarios.

=============  ====  ===========================  =====================
scenario       beta  supervised mask m            objectness mask m_r
=============  ====  ===========================  =====================
baseline       0     all ones, labels = D         unused
obj            1     y u b  (b labelled NEG)      all ones
mask           0     y u (O \\ D)                  unused
maskobj        1     y u (O \\ D)                  D
maskobjthresh  1     y u (O \\ D)                  D n (o >= t)
=============  ====  ===========================  =====================
"""
from __future__ import annotations

import sys
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .labelgen import NEG, POS, UNKNOWN
from .objectness import ObjectnessBundle

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCENARIO_NAMES = ("baseline", "obj", "mask", "maskobj", "maskobjthresh")
_MASKS = ("ones", "y_or_boundaries", "y_or_objects_minus_disk")
_REGION_MASKS = ("none", "ones", "disk", "disk_and_objectness_ge_t")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    beta: float
    mask: str
    region_mask: str
    label_mode: str = "point7x7"
    t: float | None = None

    def __post_init__(self):
        if self.mask not in _MASKS:
            raise ValueError(f"unknown mask expression {self.mask!r}")
        if self.region_mask not in _REGION_MASKS:
            raise ValueError(f"unknown region_mask expression {self.region_mask!r}")
        if self.label_mode not in ("disk_replace", "point7x7"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")
        if self.region_mask == "disk_and_objectness_ge_t" and self.t is None:
            raise ValueError(f"{self.name}: threshold t required")
        if self.beta > 0 and self.region_mask == "none":
            raise ValueError(f"{self.name}: beta > 0 needs a region mask")

    @property
    def uses_objectness(self) -> bool:
        return self.beta > 0

    def to_dict(self) -> dict:
        d = {"name": self.name, "beta": self.beta, "mask": self.mask,
             "region_mask": self.region_mask, "label_mode": self.label_mode}
        if self.t is not None:
            d["t"] = self.t
        return d


def load_scenarios(path=None) -> dict[str, ScenarioConfig]:
    """Scenario table from a TOML file (the bundled table by default)."""
    if path is None:
        text = resources.files("weakcanopy").joinpath("scenarios.toml").read_text()
    else:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    data = tomllib.loads(text)
    out = {}
    for block in data.get("scenario", []):
        cfg = ScenarioConfig(**block)
        if cfg.name in out:
            raise ValueError(f"duplicate scenario {cfg.name!r}")
        out[cfg.name] = cfg
    return out


def get_scenario(name: str) -> ScenarioConfig:
    table = load_scenarios()
    try:
        return table[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(table)}") from None


@dataclass
class LearningMasks:
    m: np.ndarray
    m_r: np.ndarray


def build_masks(scenario: ScenarioConfig, y: np.ndarray, objects: np.ndarray, disk: np.ndarray,
                bundle: ObjectnessBundle | None = None) -> tuple[LearningMasks, np.ndarray]:
    """Return ``(LearningMasks, effective tri-state labels)`` for one patch.

    ``m`` equals ``effective != UNKNOWN``.  Where a boundary pixel of the
    obj scenario is also a positive label, the positive label wins.
    """
    y = np.asarray(y)
    objects = np.asarray(objects, dtype=bool)
    disk = np.asarray(disk, dtype=bool)
    if not (y.shape == objects.shape == disk.shape):
        raise ValueError("inputs must share one grid")
    needs_bundle = scenario.beta > 0 or scenario.mask == "y_or_boundaries"
    if needs_bundle and bundle is None:
        raise ValueError(f"scenario {scenario.name!r} needs an objectness bundle")
    if bundle is not None and bundle.regions.shape != y.shape:
        raise ValueError("objectness bundle on a different grid")

    pos = y == POS
    eff = np.full(y.shape, UNKNOWN, dtype=np.uint8)
    if scenario.mask == "ones":
        eff[:] = NEG
        eff[disk if scenario.label_mode == "disk_replace" else pos] = POS
    elif scenario.mask == "y_or_boundaries":
        eff[bundle.boundaries] = NEG
        eff[pos] = POS
    else:
        eff[objects & ~disk] = NEG
        eff[y == NEG] = NEG
        eff[pos] = POS

    if scenario.region_mask == "none":
        m_r = np.zeros(y.shape, dtype=bool)
    elif scenario.region_mask == "ones":
        m_r = np.ones(y.shape, dtype=bool)
    elif scenario.region_mask == "disk":
        m_r = disk.copy()
    else:
        m_r = disk & (bundle.o >= scenario.t)
    return LearningMasks(eff != UNKNOWN, m_r), eff
