"""Keypoint accuracy (PCK, MRE) and the incremental transfer metrics AAA/A-MRE, AT, MT."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

PCK_SIGMA = 0.1


def _sign(kind: str) -> float:
    if kind == "pck":
        return 1.0
    if kind == "mre":
        return -1.0  # lower error is better
    raise ValueError(f"unknown metric kind {kind!r}")


def _visible_pairs(preds, gts, visible):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if preds.shape != gts.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {gts.shape}")
    mask = np.ones(len(gts), bool) if visible is None else np.asarray(visible, bool).reshape(-1)
    return preds, gts, mask


def mre(preds, gts, visible=None) -> float:
    """Mean Euclidean distance (pixels) over visible keypoints."""
    preds, gts, mask = _visible_pairs(preds, gts, visible)
    if not mask.any():
        raise ValueError("MRE needs at least one visible keypoint")
    return float(np.linalg.norm(preds[mask] - gts[mask], axis=1).mean())


def pck(preds, gts, d, sigma: float = PCK_SIGMA, visible=None) -> float:
    """Percentage of visible keypoints with ``||pred - gt|| / d <= sigma``.

    ``d`` is a scalar or one normalizer per keypoint pair.
    """
    preds, gts, mask = _visible_pairs(preds, gts, visible)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (len(gts),))
    if np.any(d <= 0):
        raise ValueError("PCK normalizer must be positive")
    if sigma <= 0:
        raise ValueError("PCK threshold must be positive")
    if not mask.any():
        raise ValueError("PCK needs at least one visible keypoint")
    dist = np.linalg.norm(preds - gts, axis=1) / d
    return float(100.0 * (dist[mask] <= sigma).mean())


def bbox_longest_side(xy: np.ndarray, labeled: np.ndarray | None = None) -> np.ndarray:
    """Longest side of the tight box around each sample's labeled keypoints; xy is (N, K, 2)."""
    xy = np.asarray(xy, dtype=np.float64)
    if labeled is not None:
        xy = np.where(np.asarray(labeled, bool)[..., None], xy, np.nan)
    span = np.nanmax(xy, axis=1) - np.nanmin(xy, axis=1)
    return np.maximum(span.max(axis=1), 1.0)


@dataclass
class AccuracyMatrix:
    """``A[i, j]``: mean metric of the keypoints introduced at step j, measured after step i."""

    kind: str = "pck"
    values: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        _sign(self.kind)

    def __setitem__(self, key: tuple[int, int], value: float) -> None:
        i, j = key
        if j > i:
            raise IndexError(f"a[{i}][{j}] undefined: group {j} not learned yet")
        if self.kind == "pck" and not 0.0 <= value <= 100.0:
            raise ValueError(f"PCK must lie in [0, 100], got {value}")
        if self.kind == "mre" and value < 0:
            raise ValueError(f"MRE must be non-negative, got {value}")
        self.values[(i, j)] = float(value)

    def __getitem__(self, key: tuple[int, int]) -> float:
        return self.values[key]


def average_transfer(acc: AccuracyMatrix, t: int) -> float:
    """Mean change of every earlier group's accuracy since it was learned.

    The divisor is the number of earlier steps (t, counting step 0).
    """
    if t < 1:
        raise ValueError("average transfer is defined from the first incremental step on")
    s = _sign(acc.kind)
    return sum(s * (acc[t, j] - acc[j, j]) for j in range(t)) / t


def maximal_transfer(current: Mapping[int, float], initial: Mapping[int, float], kind: str = "pck") -> float:
    """Largest per-keypoint change among old keypoints (keys of ``initial``)."""
    s = _sign(kind)
    if not initial:
        raise ValueError("maximal transfer needs at least one old keypoint")
    return max(s * (current[k] - initial[k]) for k in initial)


@dataclass
class StepReport:
    step: int
    kind: str
    overall: float
    at: float | None
    mt: float | None
    per_keypoint: dict[int, float]
    group_accuracy: dict[int, float] = field(default_factory=dict)
    extras: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_keypoint"] = {str(k): v for k, v in self.per_keypoint.items()}
        d["group_accuracy"] = {str(k): v for k, v in self.group_accuracy.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> StepReport:
        return cls(
            d["step"],
            d["kind"],
            d["overall"],
            d["at"],
            d["mt"],
            {int(k): v for k, v in d["per_keypoint"].items()},
            {int(k): v for k, v in d.get("group_accuracy", {}).items()},
            dict(d.get("extras", {})),
        )


@dataclass
class KeypointScores:
    """Per-keypoint correctness counts on one evaluation set."""

    correct: np.ndarray  # (K,) number of visible samples within threshold
    count: np.ndarray  # (K,) number of visible samples
    dist_sum: np.ndarray  # (K,) summed pixel error over visible samples

    def pck(self, k: int) -> float:
        return 100.0 * self.correct[k] / self.count[k] if self.count[k] else float("nan")

    def mre(self, k: int) -> float:
        return self.dist_sum[k] / self.count[k] if self.count[k] else float("nan")

    def pooled(self, keys, kind: str = "pck") -> float:
        keys = list(keys)
        n = self.count[keys].sum()
        if n == 0:
            return float("nan")
        if kind == "pck":
            return float(100.0 * self.correct[keys].sum() / n)
        return float(self.dist_sum[keys].sum() / n)

    def value(self, k: int, kind: str = "pck") -> float:
        return self.pck(k) if kind == "pck" else self.mre(k)


def score_keypoints(pred_xy: np.ndarray, gt_xy: np.ndarray, visible: np.ndarray, d: np.ndarray, sigma: float = PCK_SIGMA) -> KeypointScores:
    """pred_xy/gt_xy (N, K, 2) in image pixels, visible (N, K), d (N,)."""
    dist = np.linalg.norm(np.asarray(pred_xy, np.float64) - np.nan_to_num(np.asarray(gt_xy, np.float64)), axis=-1)
    vis = np.asarray(visible, bool)
    ok = (dist / np.asarray(d, np.float64)[:, None] <= sigma) & vis
    return KeypointScores(ok.sum(axis=0), vis.sum(axis=0), np.where(vis, dist, 0.0).sum(axis=0))


def build_report(
    step: int,
    scores: KeypointScores,
    groups: list[tuple[int, ...]],
    acc: AccuracyMatrix,
    initial: dict[int, float],
    extras: dict[str, float] | None = None,
) -> StepReport:
    """Fill ``acc`` row ``step`` and ``initial`` for the new group, then assemble the report.

    ``initial`` maps every keypoint to its accuracy right after the step that introduced it.
    """
    kind = acc.kind
    learned = [k for g in groups[: step + 1] for k in g]
    for j in range(step + 1):
        acc[step, j] = scores.pooled(groups[j], kind)
    for k in groups[step]:
        initial[k] = scores.value(k, kind)
    per_kp = {k: scores.value(k, kind) for k in learned}
    at = mt = None
    if step >= 1:
        at = average_transfer(acc, step)
        old = {k: initial[k] for g in groups[:step] for k in g if not np.isnan(initial[k])}
        mt = maximal_transfer(per_kp, old, kind)
    return StepReport(
        step,
        kind,
        scores.pooled(learned, kind),
        at,
        mt,
        per_kp,
        {j: acc[step, j] for j in range(step + 1)},
        dict(extras or {}),
    )
