"""Optimisation loop: batching, gradient accumulation, validation, selection."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .dataset import PatchArrays, ScenarioArrays, apply_scenario
from .evaluation import Confusion, dense_confusion, sparse_confusion
from .losses import batch_loss
from .maskgen import ScenarioConfig
from .model import Checkpoint, NetConfig, UNet, snapshot

log = logging.getLogger(__name__)

SEED_ENV = "WEAKCANOPY_SEED"
CRITERIA = ("val_recall", "model_selection_iou", "val_ba")


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


@dataclass
class TrainConfig:
    patch: int = 300
    batch: int = 36
    accumulation_steps: int = 14
    epochs: int = 500
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (300, 400)
    lr_gamma: float = 0.5
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return replace(cls(patch=64, batch=8, accumulation_steps=2, epochs=30), **overrides)

    @property
    def samples_per_step(self) -> int:
        return self.batch * self.accumulation_steps


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    steps: int
    metrics: dict = field(default_factory=dict)


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best: dict[str, Checkpoint] = field(default_factory=dict)
    last: Checkpoint | None = None
    optimizer_steps: int = 0

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


def make_net(config: NetConfig, seed: int) -> UNet:
    torch.manual_seed(seed)
    return UNet(config)


def set_determinism(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True)


def _tensors(data: PatchArrays, sc: ScenarioArrays, idx, beta: float):
    t = {
        "x": torch.from_numpy(data.images[idx]),
        "labels": torch.from_numpy(sc.labels[idx]),
        "m": torch.from_numpy(sc.m[idx]),
    }
    if beta > 0:
        t["o"] = torch.from_numpy(data.o[idx])
        t["regions"] = torch.from_numpy(data.regions[idx].astype(np.int64))
        t["m_r"] = torch.from_numpy(sc.m_r[idx])
    return t


def loss_on_batch(net: UNet, batch: dict, beta: float) -> torch.Tensor:
    pred = net(batch["x"])
    return batch_loss(pred, batch["labels"], batch["m"], batch.get("o"), batch.get("regions"),
                      batch.get("m_r"), beta)


def accumulate_gradients(net: UNet, batches: Iterable[dict], beta: float, accumulation_steps: int) -> list[float]:
    """Backpropagate each batch loss divided by ``accumulation_steps``.

    Gradients add up in ``.grad``; the caller steps the optimiser.  Returns
    the undivided batch losses.
    """
    losses = []
    for batch in batches:
        loss = loss_on_batch(net, batch, beta)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite loss")
        (loss / accumulation_steps).backward()
        losses.append(float(loss.detach()))
    return losses


def predict_patches(net: UNet, images: np.ndarray, batch: int = 32) -> np.ndarray:
    net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            out.append(net(torch.from_numpy(images[i:i + batch])).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.float32)


def validate(net: UNet, val: PatchArrays, threshold: float = 0.5) -> dict:
    pred = predict_patches(net, val.images)
    conf = Confusion()
    for p, y in zip(pred, val.y_eval):
        conf = conf + sparse_confusion(p, y, threshold)
    metrics = {"val_recall": conf.recall, "val_ba": conf.balanced_accuracy}
    if val.truth is not None:
        dconf = Confusion()
        for p, t in zip(pred, val.truth):
            dconf = dconf + dense_confusion(p, t, threshold)
        metrics["model_selection_iou"] = dconf.iou
    return metrics


def _better(new, old) -> bool:
    if new is None:
        return False
    return old is None or new > old


def train(net: UNet, train_data: PatchArrays, val_data: PatchArrays | None, cfg: TrainConfig,
          scenario: ScenarioConfig, out_dir=None, on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainHistory:
    """Train ``net`` on one scenario; keeps the best checkpoint per criterion and the last."""
    if len(train_data) == 0:
        raise TrainingError("empty training split")
    if scenario.uses_objectness and not train_data.has_objectness:
        raise TrainingError(f"scenario {scenario.name!r} needs objectness bundles")
    set_determinism(cfg.seed)
    sc = apply_scenario(train_data, scenario)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.lr_milestones), gamma=cfg.lr_gamma)
    gen = torch.Generator().manual_seed(cfg.seed)
    hist = TrainHistory()
    out = Path(out_dir) if out_dir else None
    metrics_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    n = len(train_data)
    try:
        for epoch in range(1, cfg.epochs + 1):
            net.train()
            order = torch.randperm(n, generator=gen).numpy()
            batches = [np.sort(order[i:i + cfg.batch]) for i in range(0, n, cfg.batch)]
            opt.zero_grad(set_to_none=True)
            losses, pending, steps = [], 0, 0
            for bi, idx in enumerate(batches):
                try:
                    losses += accumulate_gradients(net, [_tensors(train_data, sc, idx, scenario.beta)],
                                                   scenario.beta, cfg.accumulation_steps)
                except TrainingError:
                    _dump_failure(out, epoch, bi, idx, train_data)
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}, "
                                        f"patches {[train_data.refs[i] for i in idx]}") from None
                pending += 1
                if pending == cfg.accumulation_steps or bi == len(batches) - 1:
                    opt.step()
                    opt.zero_grad(set_to_none=True)
                    pending = 0
                    steps += 1
            sched.step()
            hist.optimizer_steps += steps
            metrics = validate(net, val_data, cfg.threshold) if val_data is not None and len(val_data) else {}
            rec = EpochRecord(epoch, float(np.mean(losses)), steps, metrics)
            hist.records.append(rec)
            ckpt = None
            for crit in CRITERIA:
                prev = hist.best.get(crit)
                if crit in metrics and _better(metrics[crit], prev.metrics.get(crit) if prev else None):
                    ckpt = ckpt or snapshot(net, epoch=epoch, metrics=metrics, scenario=scenario.name,
                                            seed=cfg.seed, extra={"train_config": _cfg_dict(cfg)})
                    hist.best[crit] = ckpt
            if metrics_fh:
                metrics_fh.write(json.dumps({"epoch": epoch, "loss": rec.loss, "steps": steps, **metrics},
                                            sort_keys=True) + "\n")
                metrics_fh.flush()
            log.info("%s epoch %d loss %.5f %s", scenario.name, epoch, rec.loss, metrics)
            if on_epoch:
                on_epoch(rec)
    finally:
        if metrics_fh:
            metrics_fh.close()
    hist.last = snapshot(net, epoch=cfg.epochs, metrics=hist.records[-1].metrics, scenario=scenario.name,
                         seed=cfg.seed, extra={"train_config": _cfg_dict(cfg)})
    if out:
        hist.last.save(out / "last.ckpt")
        for crit, ck in hist.best.items():
            ck.save(out / f"best_{crit}.ckpt")
    return hist


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lr_milestones"] = list(cfg.lr_milestones)
    return d


def _dump_failure(out: Path | None, epoch: int, batch: int, idx, data: PatchArrays):
    if out is None:
        return
    (out / "nonfinite_batch.json").write_text(json.dumps(
        {"epoch": epoch, "batch": batch, "patches": [list(data.refs[i]) for i in idx]}, indent=1))


def select_checkpoint(history: Sequence, criterion: str = "val_recall"):
    """Entry with the largest ``criterion``; ties go to the earliest epoch.

    ``history`` holds :class:`EpochRecord`, :class:`Checkpoint` or plain
    metric dicts.
    """
    if not history:
        raise ValueError("empty history")
    best, best_val = None, None
    for entry in history:
        metrics = entry if isinstance(entry, dict) else entry.metrics
        if criterion not in metrics:
            raise KeyError(f"criterion {criterion!r} missing from snapshot")
        val = metrics[criterion]
        if val is not None and (isinstance(val, float) and math.isnan(val)):
            val = None
        if best is None or (val is not None and (best_val is None or val > best_val)):
            best, best_val = entry, val
    return best
