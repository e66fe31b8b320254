"""Training objectives. Batch reduction is mean over images, sum over keypoints/axes/pixels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .heatmap import channel_softmax, spatial_softmax

KSD_AXES = ("height", "width")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_gt(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Summed squared error over visible channels, averaged over the batch.

    pred, gt: (B, C, H, W); mask: (B, C), true where the channel is supervised.
    """
    _check_shapes(pred, gt)
    sq = (pred - gt).square().sum(dim=(-2, -1))
    if mask is not None:
        if mask.shape != sq.shape:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match {tuple(sq.shape)}")
        sq = torch.where(mask.bool(), sq, torch.zeros_like(sq))
    return sq.sum() / pred.shape[0]


def _spatial_ce(student: torch.Tensor, teacher: torch.Tensor, axis: str) -> torch.Tensor:
    p = spatial_softmax(teacher, axis)
    log_q = spatial_softmax(student, axis, log=True)
    return -(p * log_q).sum()


def loss_ksd(student: torch.Tensor, teacher: torch.Tensor, axes: Sequence[str] = KSD_AXES) -> torch.Tensor:
    """Keypoint-oriented spatial distillation.

    For every old keypoint channel and each axis in ``axes``, cross-entropy between the
    teacher's and the student's axis-wise softmax, summed over all slices of the grid.
    Teacher gradients are not tracked.
    """
    _check_shapes(student, teacher)
    teacher = teacher.detach()
    total = sum(_spatial_ce(student, teacher, axis) for axis in axes)
    return total / student.shape[0]


def loss_kd_channel(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Classification-style distillation: softmax across old channels at every pixel."""
    _check_shapes(student, teacher)
    p = channel_softmax(teacher.detach())
    log_q = channel_softmax(student, log=True)
    return -(p * log_q).sum() / student.shape[0]


def loss_ka_stage2(student: torch.Tensor, kanet: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Squared error between the student's and the frozen association net's heatmap.

    ``reduction="mean"`` averages over every pixel; ``"sum"`` sums pixels and averages over
    the batch, the same reduction as the association net's own training loss.
    """
    _check_shapes(student, kanet)
    sq = (student - kanet.detach()).square()
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.sum() / student.shape[0]
    raise ValueError(f"unknown reduction {reduction!r}")


def loss_ka_spatial(student: torch.Tensor, kanet: torch.Tensor) -> torch.Tensor:
    """Softened alternative to ``loss_ka_stage2``: spatial cross-entropy on both axes."""
    return loss_ksd(student, kanet)


@dataclass
class LossBreakdown:
    gt_term: float | torch.Tensor
    ksd_term: float | torch.Tensor
    ka_term: float | torch.Tensor
    alpha: float
    total: float | torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("gt_term", "ksd_term", "ka_term", "alpha", "total")}


def loss_mp(gt_term, ksd_term=0.0, ka_term=0.0, alpha: float = 100.0) -> LossBreakdown:
    """Mutual-promotion objective ``gt + alpha * (ksd + ka)``; terms may be tensors."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    total = gt_term + alpha * (ksd_term + ka_term)
    return LossBreakdown(gt_term, ksd_term, ka_term, alpha, total)
