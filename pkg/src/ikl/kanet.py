"""Knowledge association network and its Stage-I training against old-model pseudo-labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
from torch import nn

from .model import flush_denormals, snapshot_frozen

log = logging.getLogger(__name__)


@dataclass
class KATrainLog:
    initial: float
    final: float = float("nan")
    epoch_losses: list[float] = field(default_factory=list)


class KANet(nn.Module):
    """Predicts one old keypoint's heatmap from two gated copies of the holistic features.

    conv1/conv2 use 15x15 kernels (padding 7) with batch norm and ReLU; conv3 is a 1x1
    projection to a single heatmap channel.
    """

    def __init__(self, feature_channels: int, width: int = 8, kernel: int = 15):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(2 * feature_channels, width, kernel, 1, pad, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, kernel, 1, pad, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, 1, 1)
        self.relu = nn.ReLU()
        self.arch = {"feature_channels": feature_channels, "width": width, "kernel": kernel}
        self.frozen = False

    @staticmethod
    def gate(gt_a: torch.Tensor, gt_b: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Broadcast each source heatmap over the feature channels and concatenate."""
        if gt_a.shape[-2:] != v.shape[-2:] or gt_b.shape[-2:] != v.shape[-2:]:
            raise ValueError(f"spatial mismatch: {tuple(gt_a.shape[-2:])}, {tuple(gt_b.shape[-2:])} vs {tuple(v.shape[-2:])}")
        if gt_a.dim() == v.dim() - 1:
            gt_a, gt_b = gt_a.unsqueeze(-3), gt_b.unsqueeze(-3)
        return torch.cat([gt_a * v, gt_b * v], dim=-3)

    def forward(self, gt_a: torch.Tensor, gt_b: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        x = self.gate(gt_a, gt_b, v)
        x = self.relu(self.bn1(self.conv1(x)))
        x = self.relu(self.bn2(self.conv2(x)))
        return self.conv3(x)

    def train(self, mode: bool = True):
        if mode and getattr(self, "frozen", False):
            raise RuntimeError("frozen association net cannot be put in training mode")
        return super().train(mode)


def ka_forward(net: KANet, gt_a: torch.Tensor, gt_b: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Single-sample or batched association forward; returns (..., 1, H, W) heatmaps."""
    single = v.dim() == 3
    if single:
        gt_a, gt_b, v = gt_a[None], gt_b[None], v[None]
    out = net(gt_a, gt_b, v)
    return out[0] if single else out


@flush_denormals()
def train_kanet(
    net: KANet,
    sources_a: torch.Tensor,
    sources_b: torch.Tensor,
    features: torch.Tensor,
    pseudo_target: torch.Tensor,
    epochs: int,
    optimizer: str = "adam",
    lr: float = 1e-3,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[KANet, KATrainLog]:
    """Fit the association net to the old model's heatmap of the target keypoint.

    ``optimizer`` is "sgd" or "adam", mirroring the main trainer. All inputs are precomputed with frozen networks: ``features`` from the frozen old
    extractor, ``pseudo_target`` from the frozen old model, sources from ground truth (or
    the old model's pseudo-heatmap for an old source). Only ``net`` is updated. The loss per
    batch is the summed squared error per image averaged over images. Returns the frozen net
    and a log with the eval-mode loss before and after training plus per-epoch batch means.
    """
    n = len(features)
    if n == 0:
        raise ValueError("association net needs training data")
    if optimizer == "sgd":
        opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    elif optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    gen = torch.Generator().manual_seed(seed)
    history = KATrainLog(_epoch_loss(net, sources_a, sources_b, features, pseudo_target, batch_size))
    for epoch in range(epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        running, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            pred = net(sources_a[idx], sources_b[idx], features[idx])
            loss = (pred - pseudo_target[idx]).square().sum() / len(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)
        history.epoch_losses.append(running / max(seen, 1))
        log.debug("kanet epoch %d loss %.4f", epoch, history.epoch_losses[-1])
    history.final = _epoch_loss(net, sources_a, sources_b, features, pseudo_target, batch_size)
    return snapshot_frozen(net), history


@torch.no_grad()
def _epoch_loss(net, a, b, v, target, batch_size) -> float:
    net.eval()
    total = 0.0
    for start in range(0, len(v), 4 * batch_size):
        sl = slice(start, start + 4 * batch_size)
        total += float((net(a[sl], b[sl], v[sl]) - target[sl]).square().sum())
    return total / len(v)


@torch.no_grad()
def predict(net: KANet, a: torch.Tensor, b: torch.Tensor, v: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    net.eval()
    return torch.cat([net(a[i : i + batch_size], b[i : i + batch_size], v[i : i + batch_size]) for i in range(0, len(v), batch_size)])
