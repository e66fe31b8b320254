"""Incremental keypoint estimator: shared extractor plus an append-only stack of heads."""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn


class CheckpointError(RuntimeError):
    pass


@contextlib.contextmanager
def flush_denormals():
    """Flush subnormal floats to zero while training.

    Gaussian target tails underflow into the subnormal range, which makes CPU convolutions
    several times slower. torch has no getter for the flag, so it is reset to its default.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True))


class Extractor(nn.Module):
    """Small encoder-decoder producing features at 1/4 of the image resolution.

    A stride-4 patch stem, two stride-2 encoder blocks and two upsampling blocks with skip
    connections back to the heatmap grid.
    """

    def __init__(self, width: int = 16, feature_channels: int = 16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(1, width, 4, 4), nn.ReLU(inplace=True))
        self.enc1 = _conv(width, width)
        self.enc2 = _conv(width, 2 * width, stride=2)
        self.enc3 = _conv(2 * width, 2 * width, stride=2)
        self.dec1 = _conv(4 * width, 2 * width)
        self.dec2 = _conv(3 * width, feature_channels)
        self.stride = 4
        self.out_channels = feature_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = self.enc1(self.stem(x))
        b = self.enc2(a)
        c = self.enc3(b)
        u = self.dec1(torch.cat([F.interpolate(c, size=b.shape[-2:]), b], 1))
        return self.dec2(torch.cat([F.interpolate(u, size=a.shape[-2:]), a], 1))


class Head(nn.Module):
    def __init__(self, in_channels: int, n_keypoints: int, hidden: int = 8):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, 1, 1), nn.ReLU(inplace=True), nn.Conv2d(hidden, n_keypoints, 1)
        )
        self.n_keypoints = n_keypoints

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.body(v)


class IncrementalModel(nn.Module):
    def __init__(
        self,
        group_sizes: list[int],
        img_size: tuple[int, int] = (128, 128),
        width: int = 16,
        feature_channels: int = 16,
        head_hidden: int = 8,
        seed: int = 0,
    ):
        super().__init__()
        if img_size[0] % 4 or img_size[1] % 4:
            raise ValueError("image size must be divisible by 4")
        self.img_size = tuple(img_size)
        self.arch = {"width": width, "feature_channels": feature_channels, "head_hidden": head_hidden}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.extractor = Extractor(width, feature_channels)
            self.heads = nn.ModuleList(Head(feature_channels, g, head_hidden) for g in group_sizes)
        self.frozen = False

    @property
    def group_sizes(self) -> list[int]:
        return [h.n_keypoints for h in self.heads]

    @property
    def step_index(self) -> int:
        return len(self.heads) - 1

    @property
    def n_outputs(self) -> int:
        return sum(self.group_sizes)

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return (self.img_size[0] // 4, self.img_size[1] // 4)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (features, heatmaps); heatmap channels follow the step order of the heads."""
        if image.dim() != 4 or image.shape[1] != 1 or tuple(image.shape[-2:]) != self.img_size:
            raise ValueError(f"expected images shaped (B, 1, {self.img_size[0]}, {self.img_size[1]}), got {tuple(image.shape)}")
        v = self.extractor(image)
        return v, torch.cat([h(v) for h in self.heads], dim=1)

    def train(self, mode: bool = True):
        if mode and getattr(self, "frozen", False):
            raise RuntimeError("frozen snapshot cannot be put in training mode")
        return super().train(mode)

    def config_hash(self) -> str:
        payload = json.dumps({"img_size": self.img_size, **self.arch}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def grow(model: IncrementalModel, new_group_size: int, init_seed: int) -> IncrementalModel:
    """Copy the old model and append a freshly initialized head for the new keypoints."""
    if new_group_size < 1:
        raise ValueError("new group must contain at least one keypoint")
    new = copy.deepcopy(model)
    new.frozen = False
    for p in new.parameters():
        p.requires_grad_(True)
    new.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        new.heads.append(Head(new.extractor.out_channels, new_group_size, new.arch["head_hidden"]))
    return new


def snapshot_frozen(model: nn.Module) -> nn.Module:
    """Deep, inference-only copy: eval mode, no gradients, refuses ``train()``."""
    snap = copy.deepcopy(model)
    snap.eval()
    for p in snap.parameters():
        p.requires_grad_(False)
    snap.frozen = True
    return snap


def save_checkpoint(path: str | Path, model: IncrementalModel, extra: dict | None = None, kanet: nn.Module | None = None) -> Path:
    path = Path(path)
    manifest = {
        "step_index": model.step_index,
        "group_sizes": model.group_sizes,
        "img_size": list(model.img_size),
        "arch": model.arch,
        "config_hash": model.config_hash(),
        **(extra or {}),
    }
    # plain JSON types only, so the archive loads with weights_only
    manifest = json.loads(json.dumps(manifest, default=lambda o: o.item() if hasattr(o, "item") else str(o)))
    payload = {
        "manifest": manifest,
        "extractor": model.extractor.state_dict(),
        "heads": [h.state_dict() for h in model.heads],
    }
    if kanet is not None:
        payload["kanet"] = kanet.state_dict()
        payload["kanet_arch"] = kanet.arch
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[IncrementalModel, dict, dict | None]:
    """Return (model, manifest, kanet payload or None)."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        manifest = payload["manifest"]
        model = IncrementalModel(manifest["group_sizes"], tuple(manifest["img_size"]), **manifest["arch"])
        if model.config_hash() != manifest["config_hash"]:
            raise CheckpointError(f"config hash mismatch in {path}")
        model.extractor.load_state_dict(payload["extractor"])
        for head, state in zip(model.heads, payload["heads"]):
            head.load_state_dict(state)
    except CheckpointError:
        raise
    except Exception as exc:  # torch raises a zoo of types for truncated/garbled files
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    kanet = None
    if "kanet" in payload:
        kanet = {"state": payload["kanet"], "arch": payload["kanet_arch"]}
    return model, manifest, kanet
