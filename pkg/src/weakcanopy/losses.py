"""Masked supervised BCE, per-instance objectness BCE, and their sum.

All functions take probabilities (not logits) and are written in torch so
gradients come from autograd.  Single-image functions accept (h, w)
tensors; :func:`batch_loss` averages the per-image combined loss over a
batch, which keeps gradient accumulation equivalent to a larger batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class LossValue:
    value: torch.Tensor
    empty: bool = False

    def __float__(self):
        return float(self.value.detach())


def _check_finite(pred: torch.Tensor):
    if torch.isnan(pred).any():
        raise ValueError("NaN in predictions")


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise BCE with predictions clamped to [EPS, 1 - EPS]."""
    p = pred.clamp(EPS, 1.0 - EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def masked_bce(pred: torch.Tensor, labels: torch.Tensor, m: torch.Tensor) -> LossValue:
    """Mean BCE over pixels selected by ``m``; zero (flagged) when none are."""
    _check_finite(pred)
    sel = m.bool()
    n = sel.sum()
    if n == 0:
        log.debug("masked_bce: empty selection")
        return LossValue(pred.sum() * 0.0, empty=True)
    return LossValue(bce(pred[sel], labels[sel].to(pred.dtype)).sum() / n)


def objectness_loss(pred: torch.Tensor, o: torch.Tensor, regions: torch.Tensor, m_r: torch.Tensor) -> LossValue:
    """Mean over instances of the within-instance mean BCE(pred, o).

    Only pixels with ``m_r`` set count; instances left without pixels are
    skipped, so every remaining instance weighs the same regardless of size.
    """
    _check_finite(pred)
    sel = m_r.bool() & (regions > 0)
    if not sel.any():
        return LossValue(pred.sum() * 0.0, empty=True)
    ids = regions[sel].long()
    per_px = bce(pred[sel], o[sel].to(pred.dtype))
    uniq, inv = torch.unique(ids, return_inverse=True)
    sums = torch.zeros(len(uniq), dtype=pred.dtype).index_add(0, inv, per_px)
    counts = torch.zeros(len(uniq), dtype=pred.dtype).index_add(0, inv, torch.ones_like(per_px))
    return LossValue((sums / counts).mean())


def combined_loss(pred, labels, m, o=None, regions=None, m_r=None, beta: float = 0.0) -> LossValue:
    """``masked_bce + beta * objectness_loss`` for one image."""
    sup = masked_bce(pred, labels, m)
    if beta == 0:
        return sup
    if o is None or regions is None or m_r is None:
        raise ValueError("beta > 0 needs o, regions and m_r")
    obj = objectness_loss(pred, o, regions, m_r)
    return LossValue(sup.value + beta * obj.value, empty=sup.empty and obj.empty)


def batch_loss(pred, labels, m, o=None, regions=None, m_r=None, beta: float = 0.0) -> torch.Tensor:
    """Mean over the batch (leading axis) of per-image combined losses.

    Vectorised equivalent of averaging :func:`combined_loss` per image.
    """
    _check_finite(pred)
    n_img = pred.shape[0]
    mf = m.to(pred.dtype)
    per_px = bce(pred, labels.to(pred.dtype)) * mf
    counts = mf.flatten(1).sum(1)
    sup = per_px.flatten(1).sum(1) / counts.clamp(min=1.0)
    if beta == 0:
        return sup.mean()
    if o is None or regions is None or m_r is None:
        raise ValueError("beta > 0 needs o, regions and m_r")
    sel = m_r.bool() & (regions > 0)
    obj = torch.zeros(n_img, dtype=pred.dtype)
    if sel.any():
        img_idx = torch.arange(n_img).view(-1, 1, 1).expand_as(regions)[sel]
        key = img_idx * (int(regions.max()) + 1) + regions[sel].long()
        uniq, inv = torch.unique(key, return_inverse=True)
        px = bce(pred[sel], o[sel].to(pred.dtype))
        sums = torch.zeros(len(uniq), dtype=pred.dtype).index_add(0, inv, px)
        cnt = torch.zeros(len(uniq), dtype=pred.dtype).index_add(0, inv, torch.ones_like(px))
        owner = uniq // (int(regions.max()) + 1)
        inst_sum = torch.zeros(n_img, dtype=pred.dtype).index_add(0, owner, sums / cnt)
        inst_cnt = torch.zeros(n_img, dtype=pred.dtype).index_add(0, owner, torch.ones_like(cnt))
        obj = inst_sum / inst_cnt.clamp(min=1.0)
    return (sup + beta * obj).mean()
