"""Choose the auxiliary association task: one old keypoint predicted from two related ones."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Iterable

import numpy as np

from .synthdata import AnatomyGraph

RANDOM_POOL_SLACK = 0.10


@dataclass(frozen=True)
class KATaskSpec:
    target_old: int
    sources: tuple[int, int]
    source_kinds: tuple[str, str]
    mode: str = "nearest"
    seed: int | None = None

    def __post_init__(self):
        if len({self.target_old, *self.sources}) != 3:
            raise ValueError("task indices must be distinct")
        if "new" not in self.source_kinds:
            raise ValueError("at least one source must be a new keypoint")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sources"] = list(self.sources)
        d["source_kinds"] = list(self.source_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> KATaskSpec:
        return cls(d["target_old"], tuple(d["sources"]), tuple(d["source_kinds"]), d.get("mode", "nearest"), d.get("seed"))


def _candidates(graph: AnatomyGraph, old: list[int], new: list[int]) -> list[tuple[float, int, int, int]]:
    xy = graph.canonical
    out = []
    for o in old:
        d = np.linalg.norm(xy[new] - xy[o], axis=1)
        near = sorted(zip(np.round(d, 12), new))[:2]
        (d1, n1), (d2, n2) = near
        a, b = sorted((n1, n2))
        out.append((round(float(d1 + d2), 12), o, a, b))
    return out


def create_task(
    graph: AnatomyGraph,
    old_set: Iterable[int],
    new_set: Iterable[int],
    seed: int | None = None,
    mode: str = "nearest",
) -> KATaskSpec:
    """Pick the (old <- source pair) tuple with the smallest summed canonical distance.

    ``mode="nearest"`` is deterministic (ties: lowest old index, then lowest sources).
    ``mode="random_pool"`` draws uniformly, seeded, among tuples within 10% of the minimum.
    With a single new keypoint, its nearest old keypoint becomes the second source and the
    target is the remaining old keypoint closest to that pair.
    """
    old, new = sorted(set(old_set)), sorted(set(new_set))
    if not old or not new:
        raise ValueError("old and new keypoint sets must be non-empty")
    if set(old) & set(new):
        raise ValueError("old and new keypoint sets overlap")
    xy = graph.canonical

    if len(new) == 1:
        n1 = new[0]
        if len(old) < 2:
            raise ValueError("one new keypoint needs at least two old keypoints")
        anchor = min(old, key=lambda o: (round(float(np.linalg.norm(xy[o] - xy[n1])), 12), o))
        rest = [o for o in old if o != anchor]
        target = min(
            rest,
            key=lambda o: (round(float(np.linalg.norm(xy[o] - xy[n1]) + np.linalg.norm(xy[o] - xy[anchor])), 12), o),
        )
        return KATaskSpec(target, (n1, anchor), ("new", "old"), mode, seed)

    cands = sorted(_candidates(graph, old, new))
    if mode == "nearest":
        _, o, a, b = cands[0]
    elif mode == "random_pool":
        best = cands[0][0]
        pool = [c for c in cands if c[0] <= best * (1 + RANDOM_POOL_SLACK) + 1e-12]
        _, o, a, b = pool[int(np.random.default_rng(seed).integers(len(pool)))]
    else:
        raise ValueError(f"unknown task mode {mode!r}")
    return KATaskSpec(o, (a, b), ("new", "new"), mode, seed)


def random_task(old_set: Iterable[int], new_set: Iterable[int], seed: int) -> KATaskSpec:
    """Uniformly random (old, new pair) tuple that ignores the anatomy entirely."""
    old, new = sorted(set(old_set)), sorted(set(new_set))
    if not old or not new:
        raise ValueError("old and new keypoint sets must be non-empty")
    rng = np.random.default_rng(seed)
    target = int(old[rng.integers(len(old))])
    if len(new) >= 2:
        pairs = list(combinations(new, 2))
        a, b = pairs[int(rng.integers(len(pairs)))]
        return KATaskSpec(target, (a, b), ("new", "new"), "random", seed)
    rest = [o for o in old if o != target]
    if not rest:
        raise ValueError("one new keypoint needs at least two old keypoints")
    return KATaskSpec(target, (new[0], int(rest[rng.integers(len(rest))])), ("new", "old"), "random", seed)
