"""Sparse (point) and dense (delineation) evaluation protocols."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .labelgen import NEG, POS


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_arrays(cls, pred: np.ndarray, truth: np.ndarray) -> "Confusion":
        pred = np.asarray(pred, dtype=bool)
        truth = np.asarray(truth, dtype=bool)
        return cls(int(np.count_nonzero(pred & truth)), int(np.count_nonzero(pred & ~truth)),
                   int(np.count_nonzero(~pred & truth)), int(np.count_nonzero(~pred & ~truth)))

    @property
    def recall(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float | None:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def balanced_accuracy(self) -> float | None:
        tpr, tnr = self.recall, self.specificity
        if tpr is None or tnr is None:
            return None
        return (tpr + tnr) / 2

    @property
    def iou(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp + self.fn)

    @property
    def f1(self) -> float | None:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    def matrix(self) -> list[list[int]]:
        """Rows = truth (tree, background), columns = prediction."""
        return [[self.tp, self.fn], [self.fp, self.tn]]

    def normalized(self) -> list[list[float | None]]:
        out = []
        for row in self.matrix():
            s = sum(row)
            out.append([v / s if s else None for v in row])
        return out


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def binarize(pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    pred = np.asarray(pred)
    return pred.astype(bool) if pred.dtype == bool else pred >= threshold


def sparse_confusion(pred, y, threshold: float = 0.5) -> Confusion:
    """Confusion over labelled pixels only (POS points, NEG background)."""
    pred = binarize(pred, threshold)
    y = np.asarray(y)
    if pred.shape != y.shape:
        raise ValueError("prediction and labels not aligned")
    sel = (y == POS) | (y == NEG)
    return Confusion.from_arrays(pred[sel], y[sel] == POS)


def sparse_metrics(conf: Confusion) -> dict:
    return {
        "recall": conf.recall,
        "balanced_accuracy": conf.balanced_accuracy,
        "confusion": asdict(conf),
        "n_pos": conf.tp + conf.fn,
        "n_neg": conf.tn + conf.fp,
    }


def sparse_eval(pred, y, threshold: float = 0.5) -> dict:
    """Recall and balanced accuracy on point pixels and buffered background.

    ``y`` must carry raw point pixels as POS (no square or disk expansion).
    Recall is ``None`` when there are no positive labels.
    """
    return sparse_metrics(sparse_confusion(pred, y, threshold))


def dense_confusion(pred, truth, threshold: float = 0.5) -> Confusion:
    pred = binarize(pred, threshold)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError("prediction and ground truth not aligned")
    return Confusion.from_arrays(pred, truth)


def dense_metrics(conf: Confusion) -> dict:
    if conf.tp + conf.fn + conf.fp + conf.tn == 0:
        raise ValueError("empty ground truth")
    return {
        "iou_tree": conf.iou,
        "f1": conf.f1,
        "balanced_accuracy": conf.balanced_accuracy,
        "confusion": asdict(conf),
        "confusion_matrix": conf.matrix(),
        "confusion_normalized": conf.normalized(),
    }


def dense_eval(pred, truth, threshold: float = 0.5) -> dict:
    """IoU of the tree class, F1 and balanced accuracy against full ground truth."""
    truth = np.asarray(truth, dtype=bool)
    if truth.size == 0:
        raise ValueError("empty ground truth")
    return dense_metrics(dense_confusion(pred, truth, threshold))


def tree_cover_area(pred, resolution: float, threshold: float = 0.5) -> tuple[float, float]:
    """Covered area in m^2 and as a percentage of the evaluated extent."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    mask = binarize(pred, threshold)
    n = int(np.count_nonzero(mask))
    pct = 100.0 * n / mask.size if mask.size else 0.0
    return n * resolution * resolution, pct


@dataclass
class MetricsReport:
    scenario: str
    sparse: dict = field(default_factory=dict)
    dense: dict = field(default_factory=dict)
    cover: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)
