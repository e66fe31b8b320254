"""Procedural stick-figure dataset, anatomy graph, and keypoint step schedule.

A bundle holds one training split per incremental step (labeled only with that step's
keypoints) and a single held-out test split labeled with every scheduled keypoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .heatmap import KeypointLocation

BUNDLE_FORMAT = 1
OCCLUSION_PROB = 0.1
MAX_OCCLUDED = 2


class ExemplarAccessError(RuntimeError):
    """Raised when a finished step's training data is requested again."""


@dataclass(frozen=True)
class AnatomyGraph:
    names: tuple[str, ...]
    coords: tuple[tuple[float, float], ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("keypoint names must be unique")
        if len(self.coords) != len(self.names):
            raise ValueError("one canonical coordinate per keypoint required")
        xy = np.asarray(self.coords)
        if np.any(xy < 0) or np.any(xy > 1):
            raise ValueError("canonical coordinates must lie in the unit square")
        n = len(self.names)
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ValueError(f"invalid edge ({a}, {b})")

    @property
    def n_keypoints(self) -> int:
        return len(self.names)

    @property
    def canonical(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=np.float64)

    def parents(self) -> list[int]:
        """Parent index per joint for the tree rooted at joint 0 (-1 for the root)."""
        adj: dict[int, list[int]] = {i: [] for i in range(self.n_keypoints)}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        parent = [-1] * self.n_keypoints
        seen = {0}
        order = [0]
        for node in order:
            for nb in sorted(adj[node]):
                if nb not in seen:
                    seen.add(nb)
                    parent[nb] = node
                    order.append(nb)
        if len(seen) != self.n_keypoints:
            raise ValueError("anatomy graph must be connected")
        return parent

    def to_dict(self) -> dict:
        return {"names": list(self.names), "coords": [list(c) for c in self.coords], "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> AnatomyGraph:
        return cls(tuple(d["names"]), tuple(tuple(c) for c in d["coords"]), tuple(tuple(e) for e in d["edges"]))


def build_default_anatomy(n_keypoints: int) -> AnatomyGraph:
    """Stick figure with a torso chain, two arm chains and two leg chains.

    Joints beyond the minimal six are dealt round-robin to torso, arms and legs.
    """
    if n_keypoints < 6:
        raise ValueError(f"need at least 6 keypoints, got {n_keypoints}")
    counts = {"torso": 2, "l_arm": 1, "r_arm": 1, "l_leg": 1, "r_leg": 1}
    order = list(counts)
    for i in range(n_keypoints - 6):
        counts[order[i % 5]] += 1

    names: list[str] = []
    coords: list[tuple[float, float]] = []
    edges: list[tuple[int, int]] = []

    n_torso = counts["torso"]
    top, bottom = 0.08, 0.52
    for i in range(n_torso):
        y = top + (bottom - top) * i / (n_torso - 1)
        name = "head" if i == 0 else "pelvis" if i == n_torso - 1 else f"spine_{i}"
        names.append(name)
        coords.append((0.5, y))
        if i > 0:
            edges.append((i - 1, i))
    neck, pelvis = 1, n_torso - 1
    neck_xy = np.array(coords[neck])
    pelvis_xy = np.array(coords[pelvis])

    limbs = [
        ("l_arm", neck, neck_xy, np.array([-0.75, 0.66]), 0.42),
        ("r_arm", neck, neck_xy, np.array([0.75, 0.66]), 0.42),
        ("l_leg", pelvis, pelvis_xy, np.array([-0.3, 0.95]), 0.44),
        ("r_leg", pelvis, pelvis_xy, np.array([0.3, 0.95]), 0.44),
    ]
    for limb, root, root_xy, direction, length in limbs:
        direction = direction / np.linalg.norm(direction)
        k = counts[limb]
        prev = root
        for j in range(1, k + 1):
            xy = root_xy + direction * length * j / k
            names.append(f"{limb}_{j}")
            coords.append((round(float(xy[0]), 6), round(float(xy[1]), 6)))
            edges.append((prev, len(names) - 1))
            prev = len(names) - 1
    return AnatomyGraph(tuple(names), tuple(coords), tuple(edges))


@dataclass(frozen=True)
class KeypointSchedule:
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.groups or not self.groups[0]:
            raise ValueError("group 0 must be non-empty")
        seen: set[int] = set()
        for t, g in enumerate(self.groups):
            if not g:
                raise ValueError(f"group {t} is empty")
            if len(set(g)) != len(g) or seen & set(g):
                raise ValueError(f"group {t} overlaps earlier groups")
            seen |= set(g)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], n_keypoints: int, seed: int = 0) -> KeypointSchedule:
        """Randomly partition the keypoints into groups of the given sizes."""
        if any(s < 1 for s in sizes):
            raise ValueError(f"group sizes must be positive: {list(sizes)}")
        if sum(sizes) > n_keypoints:
            raise ValueError(f"group sum {sum(sizes)} exceeds keypoint count {n_keypoints}")
        perm = np.random.default_rng(seed).permutation(n_keypoints)
        groups, start = [], 0
        for s in sizes:
            groups.append(tuple(sorted(int(k) for k in perm[start : start + s])))
            start += s
        return cls(tuple(groups))

    @property
    def n_steps(self) -> int:
        return len(self.groups)

    @property
    def scheduled(self) -> tuple[int, ...]:
        return tuple(k for g in self.groups for k in g)

    def learned_through(self, t: int) -> tuple[int, ...]:
        return tuple(k for g in self.groups[: t + 1] for k in g)

    def validate(self, graph: AnatomyGraph) -> None:
        bad = [k for k in self.scheduled if not 0 <= k < graph.n_keypoints]
        if bad:
            raise ValueError(f"schedule references unknown keypoints {bad}")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (H, W, 1), intensities in [0, 1]
    locations: tuple[KeypointLocation, ...]
    pose_seed: int

    @property
    def xy(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.locations])

    @property
    def visible(self) -> np.ndarray:
        return np.array([p.visible for p in self.locations])


def _pose(graph: AnatomyGraph, rng: np.random.Generator) -> np.ndarray:
    """Forward kinematics with perturbed joint angles and bone lengths (unit-square coords)."""
    canon = graph.canonical
    parent = graph.parents()
    limb_joint = [not graph.names[j].startswith(("head", "spine", "pelvis")) for j in range(graph.n_keypoints)]
    delta = np.where(limb_joint, rng.normal(0.0, 0.45, graph.n_keypoints), rng.normal(0.0, 0.08, graph.n_keypoints))
    stretch = rng.uniform(0.9, 1.1, graph.n_keypoints)
    xy = np.zeros_like(canon)
    acc = np.zeros(graph.n_keypoints)
    xy[0] = canon[0]
    order = sorted(range(1, graph.n_keypoints), key=lambda j: _depth(parent, j))
    for j in order:
        p = parent[j]
        acc[j] = acc[p] + delta[j]
        rest = canon[j] - canon[p]
        c, s = np.cos(acc[j]), np.sin(acc[j])
        xy[j] = xy[p] + stretch[j] * np.array([c * rest[0] - s * rest[1], s * rest[0] + c * rest[1]])
    return xy


def _depth(parent: list[int], j: int) -> int:
    d = 0
    while parent[j] >= 0:
        j = parent[j]
        d += 1
    return d


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render_sample(graph: AnatomyGraph, pose_seed: int, img_size: tuple[int, int] = (128, 128)) -> Sample:
    """Render one grayscale stick figure; a pure function of (graph, seed, size)."""
    h, w = img_size
    if h < 32 or w < 32:
        raise ValueError(f"image must be at least 32x32, got {h}x{w}")
    rng = np.random.default_rng(pose_seed)
    local = _pose(graph, rng)

    theta = rng.uniform(-0.3, 0.3)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    pts = (local - 0.5) @ rot.T
    extent = np.ptp(pts, axis=0).max()
    margin = 6.0
    scale = rng.uniform(0.6, 0.85) * (min(h, w) - 2 * margin) / max(extent, 1e-6)
    pts = pts * scale
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    tx = rng.uniform(margin - lo[0], w - 1 - margin - hi[0])
    ty = rng.uniform(margin - lo[1], h - 1 - margin - hi[1])
    pts = pts + np.array([tx, ty])

    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.1 + 0.05 * rng.standard_normal((h, w))
    for _ in range(rng.integers(0, 3)):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        img = np.maximum(img, 0.8 * np.clip(3.5 - np.hypot(px - cx, py - cy), 0, 1))
    for a, b in graph.edges:
        d = _segment_distance(px, py, pts[a], pts[b])
        img = np.maximum(img, 0.5 * np.clip(1.5 - d, 0, 1))
    for j in range(graph.n_keypoints):
        img = np.maximum(img, np.clip(3.0 - np.hypot(px - pts[j, 0], py - pts[j, 1]), 0, 1))

    visible = np.ones(graph.n_keypoints, dtype=bool)
    occ_draw = rng.random(graph.n_keypoints)
    candidates = [int(j) for j in rng.permutation(graph.n_keypoints) if occ_draw[j] < OCCLUSION_PROB]
    for j in candidates[:MAX_OCCLUDED]:
        visible[j] = False
        x0, y0 = int(round(pts[j, 0])), int(round(pts[j, 1]))
        ys, xs = slice(max(y0 - 5, 0), y0 + 6), slice(max(x0 - 5, 0), x0 + 6)
        patch = img[ys, xs]
        img[ys, xs] = 0.3 + 0.05 * rng.standard_normal(patch.shape)

    img = np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None]
    locs = tuple(KeypointLocation(float(x), float(y), bool(v)) for (x, y), v in zip(pts, visible))
    return Sample(img, locs, pose_seed)


def sample_seed(seed: int, split: str, index: int) -> int:
    code = sum(ord(c) * 31**i for i, c in enumerate(split)) % (2**31)
    return int(np.random.SeedSequence([seed, code, index]).generate_state(1)[0])


@dataclass
class SplitArrays:
    """Stacked samples of one split. Unlabeled keypoints carry NaN coordinates."""

    images: np.ndarray  # (N, 1, H, W) float32
    xy: np.ndarray  # (N, K, 2) float32, image pixels
    visible: np.ndarray  # (N, K) bool
    labeled: np.ndarray  # (N, K) bool
    pose_seeds: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.images)

    def labeled_keypoints(self) -> set[int]:
        return {int(k) for k in np.flatnonzero(self.labeled.any(axis=0))}

    @classmethod
    def concat(cls, parts: Sequence[SplitArrays]) -> SplitArrays:
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("images", "xy", "visible", "labeled", "pose_seeds")))


@dataclass
class SplitSizes:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    @classmethod
    def uniform(cls, n_steps: int, train: int, test: int, val: int = 0) -> SplitSizes:
        return cls((train,) * n_steps, (val,) * n_steps, (test,) * n_steps)


@dataclass
class DatasetBundle:
    graph: AnatomyGraph
    schedule: KeypointSchedule
    sizes: SplitSizes
    seed: int
    img_size: tuple[int, int]
    train: list[SplitArrays]
    val: list[SplitArrays]
    test: SplitArrays
    meta_extra: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "graph": self.graph.to_dict(),
            "schedule": [list(g) for g in self.schedule.groups],
            "sizes": {"train": list(self.sizes.train), "val": list(self.sizes.val), "test": list(self.sizes.test)},
            "seed": self.seed,
            "img_size": list(self.img_size),
            **self.meta_extra,
        }


def _render_split(graph, seeds, img_size, keep: Sequence[int]) -> SplitArrays:
    n, k = len(seeds), graph.n_keypoints
    images = np.zeros((n, 1, *img_size), dtype=np.float32)
    xy = np.full((n, k, 2), np.nan, dtype=np.float32)
    visible = np.zeros((n, k), dtype=bool)
    labeled = np.zeros((n, k), dtype=bool)
    keep = list(keep)
    for i, s in enumerate(seeds):
        sample = render_sample(graph, int(s), img_size)
        images[i, 0] = sample.image[:, :, 0]
        xy[i, keep] = sample.xy[keep]
        visible[i, keep] = sample.visible[keep]
        labeled[i, keep] = True
    return SplitArrays(images, xy, visible, labeled, np.asarray(seeds, dtype=np.int64))


def make_split(
    graph: AnatomyGraph,
    schedule: KeypointSchedule,
    sizes: SplitSizes,
    seed: int = 0,
    img_size: tuple[int, int] = (128, 128),
) -> DatasetBundle:
    # re-validate: the schedule may have been built field-by-field
    schedule = KeypointSchedule(tuple(tuple(g) for g in schedule.groups))
    schedule.validate(graph)
    n_steps = schedule.n_steps
    for name in ("train", "val", "test"):
        if len(getattr(sizes, name)) != n_steps:
            raise ValueError(f"{name} sizes must list one count per step ({n_steps})")

    train, val = [], []
    for t, group in enumerate(schedule.groups):
        train.append(_render_split(graph, [sample_seed(seed, f"train{t}", i) for i in range(sizes.train[t])], img_size, group))
        val.append(_render_split(graph, [sample_seed(seed, f"val{t}", i) for i in range(sizes.val[t])], img_size, group))
    n_test = sum(sizes.test)
    test = _render_split(graph, [sample_seed(seed, "test", i) for i in range(n_test)], img_size, schedule.scheduled)
    return DatasetBundle(graph, schedule, sizes, seed, tuple(img_size), train, val, test)


# -- persistence ------------------------------------------------------------


def _split_names(bundle_or_meta) -> list[str]:
    n = len(bundle_or_meta["schedule"]) if isinstance(bundle_or_meta, dict) else bundle_or_meta.schedule.n_steps
    return [f"train_{t}" for t in range(n)] + [f"val_{t}" for t in range(n)] + ["test"]


def _split_of(bundle: DatasetBundle, name: str) -> SplitArrays:
    if name == "test":
        return bundle.test
    kind, t = name.split("_")
    return getattr(bundle, kind)[int(t)]


def save_bundle(bundle: DatasetBundle, path: str | Path) -> Path:
    """Write ``meta.json``, one ``images_<split>.npy`` per split and ``keypoints.jsonl``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_text(json.dumps(bundle.meta(), indent=2, sort_keys=True) + "\n")
    with open(path / "keypoints.jsonl", "w", encoding="utf-8") as fh:
        for name in _split_names(bundle):
            split = _split_of(bundle, name)
            np.save(path / f"images_{name}.npy", split.images)
            np.save(path / f"seeds_{name}.npy", split.pose_seeds)
            for i in range(len(split)):
                for k in np.flatnonzero(split.labeled[i]):
                    rec = {
                        "split": name,
                        "sample_id": i,
                        "keypoint_id": int(k),
                        "x": round(float(split.xy[i, k, 0]), 4),
                        "y": round(float(split.xy[i, k, 1]), 4),
                        "visible": bool(split.visible[i, k]),
                    }
                    fh.write(json.dumps(rec) + "\n")
    return path


def load_bundle(path: str | Path) -> DatasetBundle:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"no dataset bundle at {path}")
    meta = json.loads(meta_file.read_text())
    if meta.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"unsupported bundle format {meta.get('format')}")
    graph = AnatomyGraph.from_dict(meta["graph"])
    schedule = KeypointSchedule(tuple(tuple(g) for g in meta["schedule"]))
    sizes = SplitSizes(*(tuple(meta["sizes"][k]) for k in ("train", "val", "test")))
    k = graph.n_keypoints
    splits: dict[str, SplitArrays] = {}
    for name in _split_names(meta):
        images = np.load(path / f"images_{name}.npy")
        n = len(images)
        splits[name] = SplitArrays(
            images,
            np.full((n, k, 2), np.nan, dtype=np.float32),
            np.zeros((n, k), dtype=bool),
            np.zeros((n, k), dtype=bool),
            np.load(path / f"seeds_{name}.npy"),
        )
    with open(path / "keypoints.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            s = splits[rec["split"]]
            i, j = rec["sample_id"], rec["keypoint_id"]
            s.xy[i, j] = (rec["x"], rec["y"])
            s.visible[i, j] = rec["visible"]
            s.labeled[i, j] = True
    n = schedule.n_steps
    extra = {key: v for key, v in meta.items() if key not in {"format", "graph", "schedule", "sizes", "seed", "img_size"}}
    return DatasetBundle(
        graph,
        schedule,
        sizes,
        meta["seed"],
        tuple(meta["img_size"]),
        [splits[f"train_{t}"] for t in range(n)],
        [splits[f"val_{t}"] for t in range(n)],
        splits["test"],
        extra,
    )


class ProtocolData:
    """Forward-only access to a bundle's training splits.

    Once step ``t`` begins, the training split of every earlier step is refused; the
    shared test split is always readable.
    """

    def __init__(self, bundle: DatasetBundle):
        self._bundle = bundle
        self._current: int | None = None

    @property
    def bundle_info(self) -> tuple[AnatomyGraph, KeypointSchedule]:
        return self._bundle.graph, self._bundle.schedule

    @property
    def current_step(self) -> int | None:
        return self._current

    def begin_step(self, t: int) -> None:
        if self._current is not None and t <= self._current:
            raise ExemplarAccessError(f"cannot revisit step {t}; step {self._current} already started")
        if not 0 <= t < self._bundle.schedule.n_steps:
            raise IndexError(f"step {t} outside schedule")
        self._current = t

    def train(self, t: int) -> SplitArrays:
        if t != self._current:
            raise ExemplarAccessError(f"training data of step {t} is not accessible during step {self._current}")
        return self._bundle.train[t]

    def val(self, t: int) -> SplitArrays:
        if t != self._current:
            raise ExemplarAccessError(f"validation data of step {t} is not accessible during step {self._current}")
        return self._bundle.val[t]

    def test(self) -> SplitArrays:
        return self._bundle.test

    def joint_train(self) -> SplitArrays:
        """Union of every step's training split; the joint upper bound only."""
        self._current = self._bundle.schedule.n_steps - 1
        return SplitArrays.concat(self._bundle.train)
