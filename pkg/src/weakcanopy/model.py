"""U-Net variant (batch norm + ELU) and whole-tile prediction."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ingest import _axis_offsets

PRESETS = {
    "desk": {"depth": 4, "base_channels": 16},
    "paper": {"depth": 4, "base_channels": 64},
}


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    depth: int = 4
    base_channels: int = 16

    @classmethod
    def preset(cls, name: str, in_channels: int = 3) -> "NetConfig":
        return cls(in_channels=in_channels, **PRESETS[name])


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    # Replicate padding keeps constant inputs constant (no border artefacts).
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="replicate"),
        nn.BatchNorm2d(c_out),
        nn.ELU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, padding_mode="replicate"),
        nn.BatchNorm2d(c_out),
        nn.ELU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        ch = [config.base_channels * 2 ** i for i in range(config.depth + 1)]
        self.down = nn.ModuleList(
            _conv_block(config.in_channels if i == 0 else ch[i - 1], ch[i]) for i in range(config.depth)
        )
        self.bottom = _conv_block(ch[config.depth - 1], ch[config.depth])
        self.up = nn.ModuleList(
            _conv_block(ch[i + 1] + ch[i], ch[i]) for i in reversed(range(config.depth))
        )
        self.head = nn.Conv2d(ch[0], 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(n, c, h, w) -> (n, h, w) probabilities; pads to a multiple of 2**depth."""
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        k = 2 ** self.config.depth
        ph, pw = (-h) % k, (-w) % k
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        return torch.sigmoid(self.logits(x))[:, 0, :h, :w]


def forward(net: UNet, patch: np.ndarray) -> np.ndarray:
    """Inference on one (h, w, c) patch, returns (h, w) probabilities."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(patch, -1, 0), dtype=np.float32))[None]
            return net(x)[0].numpy()
    finally:
        net.train(was_training)


def predict_tile(net: UNet, tile, patch: int = 64, overlap: int = 0, batch_size: int = 16) -> np.ndarray:
    """Probability raster for a whole tile.

    Patches step by ``patch - overlap`` (last one clamped to the border);
    each pixel gets the mean of all predictions covering it.
    """
    pixels = np.asarray(getattr(tile, "pixels", tile), dtype=np.float32)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w = pixels.shape[:2]
    if overlap < 0 or 2 * overlap >= patch:
        raise ValueError("overlap must be in [0, patch/2)")
    size_r, size_c = min(patch, h), min(patch, w)
    rows = _axis_offsets(h, size_r, max(size_r - overlap, 1))
    cols = _axis_offsets(w, size_c, max(size_c - overlap, 1))
    acc = np.zeros((h, w), np.float64)
    cnt = np.zeros((h, w), np.float64)
    coords = [(r, c) for r in rows for c in cols]
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(coords), batch_size):
                chunk = coords[i:i + batch_size]
                x = np.stack([pixels[r:r + size_r, c:c + size_c] for r, c in chunk])
                out = net(torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))).numpy()
                for (r, c), p in zip(chunk, out):
                    acc[r:r + size_r, c:c + size_c] += p
                    cnt[r:r + size_r, c:c + size_c] += 1
    finally:
        net.train(was_training)
    return (acc / cnt).astype(np.float32)


# -- checkpoints -----------------------------------------------------------

_MAGIC = b"WKCKPT01"


@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    net_config: NetConfig
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    scenario: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def build(self) -> UNet:
        net = UNet(self.net_config)
        net.load_state_dict(self.state)
        net.eval()
        return net

    def to_bytes(self) -> bytes:
        tensors, blobs, offset = [], [], 0
        for name in sorted(self.state):
            arr = self.state[name].detach().cpu().contiguous().numpy()
            raw = arr.tobytes()
            tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "net_config": asdict(self.net_config), "epoch": self.epoch, "metrics": self.metrics,
            "scenario": self.scenario, "seed": self.seed, "extra": self.extra, "tensors": tensors,
        }
        hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return _MAGIC + struct.pack("<Q", len(hdr)) + hdr + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != _MAGIC:
            raise ValueError("not a weakcanopy checkpoint")
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + n])
        base = 16 + n
        state = {}
        for t in header["tensors"]:
            buf = data[base + t["offset"]: base + t["offset"] + t["nbytes"]]
            arr = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
            state[t["name"]] = torch.from_numpy(arr)
        return cls(state, NetConfig(**header["net_config"]), header["epoch"], header["metrics"],
                   header["scenario"], header["seed"], header.get("extra", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def snapshot(net: UNet, **kwargs) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return Checkpoint(state, net.config, **kwargs)
