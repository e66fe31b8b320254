"""Heatmap encoding/decoding and the softmax operators used by the distillation losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

VISIBILITY_THRESHOLD = 0.1


@dataclass(frozen=True)
class KeypointLocation:
    x: float
    y: float
    visible: bool = True


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    keypoint_id: int = 0

    def __post_init__(self):
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"heatmap must be a non-empty 2D grid, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("heatmap values must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def encode_gaussian(
    loc: KeypointLocation, grid: tuple[int, int], sigma: float = 2.0, keypoint_id: int = 0
) -> Heatmap:
    """Render an unnormalized Gaussian peak at ``loc`` (grid coordinates).

    Invisible keypoints give an all-zero map.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = grid
    if not loc.visible:
        return Heatmap(np.zeros((h, w)), keypoint_id)
    if not (0 <= loc.x < w and 0 <= loc.y < h):
        raise ValueError(f"location ({loc.x}, {loc.y}) outside {h}x{w} grid")
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    values = np.exp(-((cols - loc.x) ** 2 + (rows - loc.y) ** 2) / (2.0 * sigma**2))
    return Heatmap(values, keypoint_id)


def gaussian_targets(xy: torch.Tensor, visible: torch.Tensor, grid: tuple[int, int], sigma: float) -> torch.Tensor:
    """Batched ``encode_gaussian``: xy (..., 2) in grid units -> (..., H, W)."""
    h, w = grid
    rows = torch.arange(h, dtype=xy.dtype).view(h, 1)
    cols = torch.arange(w, dtype=xy.dtype).view(1, w)
    dx = cols - xy[..., 0, None, None]
    dy = rows - xy[..., 1, None, None]
    maps = torch.exp(-(dx**2 + dy**2) / (2.0 * sigma**2))
    return maps * visible[..., None, None].to(maps.dtype)


def decode_argmax(h: Heatmap, threshold: float = VISIBILITY_THRESHOLD) -> KeypointLocation:
    values = h.values
    idx = int(np.argmax(values))  # first occurrence in row-major order
    r, c = divmod(idx, values.shape[1])
    return KeypointLocation(x=float(c), y=float(r), visible=bool(values[r, c] > threshold))


def decode_batch(heatmaps: torch.Tensor, threshold: float = VISIBILITY_THRESHOLD) -> tuple[torch.Tensor, torch.Tensor]:
    """Argmax-decode (..., H, W) into grid coordinates (..., 2) and a visibility mask."""
    w = heatmaps.shape[-1]
    flat = heatmaps.flatten(-2)
    peak, idx = flat.max(dim=-1)
    xy = torch.stack([(idx % w).to(heatmaps.dtype), (idx // w).to(heatmaps.dtype)], dim=-1)
    return xy, peak > threshold


_AXES = {"height": -2, "width": -1}


def spatial_softmax(h, axis: str = "height", log: bool = False):
    """Softmax over the spatial grid of each heatmap.

    ``axis="height"`` normalizes every column over its H entries, ``"width"`` every row
    over its W entries, ``"full2d"`` the whole grid jointly. Accepts a ``Heatmap`` or any
    tensor whose last two dims are (H, W).
    """
    if isinstance(h, Heatmap):
        out = spatial_softmax(torch.from_numpy(h.values), axis, log)
        return Heatmap(out.numpy(), h.keypoint_id)
    fn = torch.log_softmax if log else torch.softmax
    if axis == "full2d":
        return fn(h.flatten(-2), dim=-1).view_as(h)
    if axis not in _AXES:
        raise ValueError(f"unknown softmax axis {axis!r}")
    return fn(h, dim=_AXES[axis])


def channel_softmax(stack, log: bool = False):
    """Softmax across keypoint channels at every pixel (the classification-style convention).

    ``stack`` is either a list of same-shape ``Heatmap`` or a tensor shaped (..., C, H, W).
    """
    if isinstance(stack, (list, tuple)):
        if not stack:
            raise ValueError("channel_softmax needs at least one heatmap")
        shapes = {hm.shape for hm in stack}
        if len(shapes) != 1:
            raise ValueError(f"heatmap shapes differ: {sorted(shapes)}")
        t = torch.from_numpy(np.stack([hm.values for hm in stack]))
        out = channel_softmax(t, log)
        return [Heatmap(o.numpy(), hm.keypoint_id) for o, hm in zip(out, stack)]
    fn = torch.log_softmax if log else torch.softmax
    return fn(stack, dim=-3)


def image_to_grid(xy, stride: int):
    """Map image pixel coordinates to heatmap cells (pixel-centre convention)."""
    return (xy + 0.5) / stride - 0.5


def grid_to_image(xy, stride: int):
    return (xy + 0.5) * stride - 0.5
