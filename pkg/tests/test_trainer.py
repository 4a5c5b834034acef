import json

import numpy as np
import pytest
import torch

from toys import toy_patches
from weakcanopy.dataset import apply_scenario
from weakcanopy.experiment import subset
from weakcanopy.maskgen import get_scenario
from weakcanopy.model import NetConfig
from weakcanopy.trainer import (
    EpochRecord,
    TrainConfig,
    TrainingError,
    _tensors,
    accumulate_gradients,
    loss_on_batch,
    make_net,
    select_checkpoint,
    train,
)

SMALL = NetConfig(depth=2, base_channels=4)


def _cfg(**kw):
    base = dict(patch=16, batch=4, accumulation_steps=1, epochs=2, lr=1e-2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_paper_accumulation_step_size():
    assert TrainConfig().samples_per_step == 504
    assert TrainConfig.desk().samples_per_step == 16


def test_one_step_per_504_samples(monkeypatch):
    data = toy_patches(n=72, p=8, objectness=False)
    steps = []
    orig = torch.optim.Adam.step

    def counting(self, *a, **k):
        steps.append(1)
        return orig(self, *a, **k)

    monkeypatch.setattr(torch.optim.Adam, "step", counting)
    cfg = _cfg(batch=36, accumulation_steps=2, epochs=1)
    hist = train(make_net(NetConfig(depth=1, base_channels=2), 0), data, None, cfg, get_scenario("mask"))
    # 72 samples / (36 * 2) = one step
    assert len(steps) == 1 and hist.optimizer_steps == 1


def test_steps_with_paper_settings_count():
    cfg = TrainConfig()
    n = 504 * 3
    batches = -(-n // cfg.batch)
    assert batches == 42 and batches // cfg.accumulation_steps == 3


def test_determinism_two_runs():
    data = toy_patches(n=8)
    runs = []
    for _ in range(2):
        hist = train(make_net(SMALL, 0), data, data, _cfg(), get_scenario("maskobj"))
        runs.append((hist.losses(), hist.last.digest()))
    assert runs[0] == runs[1]


def test_loss_decreases_on_separable_toy():
    data = toy_patches(n=8)
    net = make_net(SMALL, 0)
    sc = apply_scenario(data, get_scenario("mask"))
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    batch = _tensors(data, sc, np.arange(8), 0.0)
    losses = []
    for _ in range(6):
        opt.zero_grad()
        loss = loss_on_batch(net, batch, 0.0)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_accumulation_equals_concatenated_batch():
    torch.set_default_dtype(torch.float64)
    try:
        data = toy_patches(n=28, p=16)
        sc = apply_scenario(data, get_scenario("maskobj"))
        net = make_net(SMALL, 0).double().eval()  # frozen normalisation statistics
        idx = np.arange(28)

        def batch(ii):
            t = _tensors(data, sc, ii, 1.0)
            t["x"] = t["x"].double()
            return t

        net.zero_grad()
        accumulate_gradients(net, [batch(idx[i:i + 2]) for i in range(0, 28, 2)], 1.0, 14)
        g_acc = torch.cat([p.grad.flatten() for p in net.parameters()])
        net.zero_grad()
        accumulate_gradients(net, [batch(idx)], 1.0, 1)
        g_cat = torch.cat([p.grad.flatten() for p in net.parameters()])
        rel = float((g_acc - g_cat).norm() / g_cat.norm())
        assert rel < 1e-6
    finally:
        torch.set_default_dtype(torch.float32)


def test_outputs_written(tmp_path):
    data = toy_patches(n=8)
    hist = train(make_net(SMALL, 0), data, data, _cfg(), get_scenario("mask"), out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    assert (tmp_path / "last.ckpt").exists() and (tmp_path / "best_val_recall.ckpt").exists()
    assert "val_recall" in hist.best


def test_empty_split_and_missing_objectness():
    data = toy_patches(n=4, objectness=False)
    with pytest.raises(TrainingError, match="objectness"):
        train(make_net(SMALL, 0), data, None, _cfg(), get_scenario("obj"))
    with pytest.raises(TrainingError, match="empty"):
        train(make_net(SMALL, 0), subset(data, []), None, _cfg(), get_scenario("mask"))


def test_nonfinite_loss_dumps_batch(tmp_path, monkeypatch):
    data = toy_patches(n=4)
    import weakcanopy.trainer as tr
    monkeypatch.setattr(tr, "batch_loss", lambda *a, **k: torch.tensor(float("inf"), requires_grad=True))
    with pytest.raises(TrainingError, match="non-finite"):
        train(make_net(SMALL, 0), data, None, _cfg(), get_scenario("mask"), out_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_batch.json").read_text())
    assert dump["epoch"] == 1 and len(dump["patches"]) == 4


@pytest.mark.parametrize("vals,want", [([0.1, 0.9, 0.4], 2), ([0.5, 0.5], 1), ([0.3], 1), ([None, 0.2], 2)])
def test_select_checkpoint(vals, want):
    hist = [EpochRecord(i + 1, 0.0, 1, {"val_recall": v}) for i, v in enumerate(vals)]
    assert select_checkpoint(hist, "val_recall").epoch == want


def test_select_checkpoint_monotone_invariance(rng):
    for _ in range(50):
        vals = rng.random(10).round(2)
        hist = [{"val_recall": float(v), "epoch": i} for i, v in enumerate(vals)]
        scaled = [{"val_recall": float(np.exp(3 * v) + 1), "epoch": i} for i, v in enumerate(vals)]
        assert select_checkpoint(hist)["epoch"] == select_checkpoint(scaled)["epoch"]


def test_select_checkpoint_errors():
    with pytest.raises(ValueError):
        select_checkpoint([])
    with pytest.raises(KeyError):
        select_checkpoint([{"val_ba": 0.5}], "model_selection_iou")
