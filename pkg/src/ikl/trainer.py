"""Incremental protocol driver: Step-0 training, then one incremental step per keypoint group.

KAMP steps run association-net training (Stage-I) and then mutual-promotion training
(Stage-II). The baselines (finetune, LWF, the ablation arms) reuse the Stage-II loop with
terms switched off, so degenerate configurations follow identical parameter trajectories.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
import torch

from . import losses
from .heatmap import decode_batch, gaussian_targets, grid_to_image, image_to_grid
from .kanet import KANet, predict, train_kanet
from .metrics import AccuracyMatrix, StepReport, bbox_longest_side, build_report, score_keypoints
from .model import IncrementalModel, flush_denormals, grow, snapshot_frozen
from .synthdata import DatasetBundle, ProtocolData, SplitArrays
from .taskcreate import KATaskSpec, create_task, random_task

log = logging.getLogger(__name__)

METHODS = ("kamp", "kamp_ksd_only", "kamp_random_kanet", "lwf", "finetune", "joint")


class InvalidStateError(RuntimeError):
    """Raised when a step's training split carries labels it should not have."""


@dataclass(frozen=True)
class RunConfig:
    method: str = "kamp"
    alpha: float = 100.0
    epochs_total: int = 100
    epochs_stage1: int = 20
    epochs_initial: int | None = None  # Step-0 and joint training; None means epochs_total
    stage1: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_at: float = 0.8
    batch_size: int = 16
    seeds: tuple[int, ...] = (0,)
    heatmap_sigma: float = 2.0
    pck_sigma: float = 0.1
    metric: str = "pck"
    task_mode: str = "nearest"
    ksd_axes: tuple[str, ...] = ("height", "width")
    ka_loss: str = "l2"
    ka_reduction: str = "mean"
    ka_width: int = 8
    model_width: int = 16
    feature_channels: int = 16
    head_hidden: int = 8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 <= self.epochs_stage1 < self.epochs_total:
            raise ValueError("epochs_stage1 must be smaller than epochs_total")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.ka_loss not in ("l2", "spatial_ce"):
            raise ValueError(f"unknown ka_loss {self.ka_loss!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def initial_epochs(self) -> int:
        return self.epochs_initial if self.epochs_initial is not None else self.epochs_total

    @property
    def stage2_epochs(self) -> int:
        """Student epochs per incremental step, the same for every method so arms stay comparable."""
        return self.epochs_total - self.epochs_stage1

    def with_updates(self, **kw) -> RunConfig:
        return replace(self, **kw)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class StepArtifacts:
    task: KATaskSpec | None = None
    kanet: KANet | None = None
    kanet_log: object | None = None
    losses: list[dict] = field(default_factory=list)


@dataclass
class ProtocolState:
    """Everything needed to continue a protocol after ``step``."""

    step: int
    model: IncrementalModel
    acc: AccuracyMatrix
    initial: dict[int, float]
    reports: list[StepReport]


def derive_seed(seed: int, step: int, tag: str) -> int:
    code = sum(ord(c) * 131**i for i, c in enumerate(tag)) % (2**31)
    return int(np.random.SeedSequence([seed, step, code]).generate_state(1)[0])


# -- data helpers ---------------------------------------------------------------


def _images(split: SplitArrays) -> torch.Tensor:
    return torch.from_numpy(split.images)


def _targets(split: SplitArrays, keypoints: list[int], grid: tuple[int, int], sigma: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Gaussian targets (N, len(keypoints), H, W) and visibility mask (N, len(keypoints))."""
    xy = torch.from_numpy(np.nan_to_num(split.xy[:, keypoints].astype(np.float32)))
    vis = torch.from_numpy(split.visible[:, keypoints] & split.labeled[:, keypoints])
    return gaussian_targets(image_to_grid(xy, 4), vis, grid, sigma), vis


@torch.no_grad()
def infer(model: torch.nn.Module, images: torch.Tensor, batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    was_training = model.training
    model.eval()
    vs, ys = [], []
    for i in range(0, len(images), batch_size):
        v, y = model(images[i : i + batch_size])
        vs.append(v)
        ys.append(y)
    if was_training:
        model.train()
    return torch.cat(vs), torch.cat(ys)


def output_keypoints(groups: tuple[tuple[int, ...], ...], step: int) -> list[int]:
    """Keypoint id of every output channel of the step-``step`` model, in channel order."""
    return [k for g in groups[: step + 1] for k in g]


# -- optimisation ---------------------------------------------------------------------


def _optimizer(params, cfg: RunConfig, epochs: int):
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    milestone = max(1, int(round(cfg.lr_decay_at * epochs)))
    return opt, torch.optim.lr_scheduler.MultiStepLR(opt, [milestone], gamma=0.1)


@flush_denormals()
def _fit(
    model: IncrementalModel,
    images: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    new_slice: slice,
    cfg: RunConfig,
    epochs: int,
    seed: int,
    alpha: float = 0.0,
    teacher_old: torch.Tensor | None = None,
    distill: str | None = None,
    ka_channel: int | None = None,
    ka_teacher: torch.Tensor | None = None,
    stage: str = "II",
) -> list[dict]:
    """Minimise gt + alpha * (distill + ka) over ``epochs``; returns per-iteration losses."""
    model.train()
    opt, sched = _optimizer(model.parameters(), cfg, epochs)
    gen = torch.Generator().manual_seed(seed)
    n = len(images)
    n_old = new_slice.start
    history = []
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        for it, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            _, out = model(images[idx])
            gt = losses.loss_gt(out[:, new_slice], targets[idx], mask[idx])
            ksd = out.new_zeros(())
            ka = out.new_zeros(())
            if distill == "spatial":
                ksd = losses.loss_ksd(out[:, :n_old], teacher_old[idx], cfg.ksd_axes)
            elif distill == "channel":
                ksd = losses.loss_kd_channel(out[:, :n_old], teacher_old[idx])
            if ka_teacher is not None:
                student = out[:, ka_channel : ka_channel + 1]
                if cfg.ka_loss == "l2":
                    ka = losses.loss_ka_stage2(student, ka_teacher[idx], cfg.ka_reduction)
                else:
                    ka = losses.loss_ka_spatial(student, ka_teacher[idx])
            parts = losses.loss_mp(gt, ksd, ka, alpha)
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            history.append({"stage": stage, "epoch": epoch, "iter": it, **parts.as_floats()})
        sched.step()
    model.eval()
    return history


# -- evaluation --------------------------------------------------------------------------


def evaluate(model: IncrementalModel, test: SplitArrays, keypoints: list[int], sigma: float = 0.1):
    """Score the model's channels (``keypoints`` in channel order) on the shared test split."""
    _, y = infer(model, _images(test))
    grid_xy, _ = decode_batch(y)
    k_total = test.xy.shape[1]
    pred = np.zeros((len(test), k_total, 2))
    pred[:, keypoints] = grid_to_image(grid_xy.numpy().astype(np.float64), 4)
    visible = np.zeros_like(test.visible)
    visible[:, keypoints] = test.visible[:, keypoints]
    d = bbox_longest_side(test.xy, test.labeled)
    return score_keypoints(pred, test.xy, visible, d, sigma)


def _target_pck(heatmaps: torch.Tensor, test: SplitArrays, k: int, sigma: float) -> float:
    grid_xy, _ = decode_batch(heatmaps)
    pred = grid_to_image(grid_xy.numpy().astype(np.float64), 4)
    vis = test.visible[:, k]
    d = bbox_longest_side(test.xy, test.labeled)
    dist = np.linalg.norm(pred - test.xy[:, k], axis=-1) / d
    return float(100.0 * (dist[vis] <= sigma).mean()) if vis.any() else float("nan")


# -- protocol steps ------------------------------------------------------------------------


def check_no_leakage(split: SplitArrays, group: tuple[int, ...], step: int) -> None:
    extra = split.labeled_keypoints() - set(group)
    if extra:
        raise InvalidStateError(f"step {step} training data carries labels of other keypoints {sorted(extra)}")


def train_initial(data: ProtocolData, cfg: RunConfig, seed: int) -> IncrementalModel:
    """Supervised Step-0 model on the first keypoint group."""
    _, schedule = data.bundle_info
    if data.current_step != 0:
        data.begin_step(0)
    split = data.train(0)
    group = schedule.groups[0]
    check_no_leakage(split, group, 0)
    model = IncrementalModel(
        [len(group)],
        tuple(split.images.shape[-2:]),
        cfg.model_width,
        cfg.feature_channels,
        cfg.head_hidden,
        seed=derive_seed(seed, 0, "init"),
    )
    targets, mask = _targets(split, list(group), model.heatmap_size, cfg.heatmap_sigma)
    _fit(model, _images(split), targets, mask, slice(0, len(group)), cfg, cfg.initial_epochs, derive_seed(seed, 0, "order"), stage="0")
    return model


def _association_inputs(task: KATaskSpec, split: SplitArrays, old_heat: torch.Tensor, old_channels: list[int], grid, sigma):
    """Source heatmaps for the association net: ground truth for new, pseudo for old sources."""
    maps = []
    for k, kind in zip(task.sources, task.source_kinds):
        if kind == "new":
            t, _ = _targets(split, [k], grid, sigma)
            maps.append(t[:, 0:1])
        else:
            maps.append(old_heat[:, old_channels.index(k) : old_channels.index(k) + 1])
    return maps


def run_step(
    prev: IncrementalModel,
    data: ProtocolData,
    step: int,
    cfg: RunConfig,
    seed: int,
) -> tuple[IncrementalModel, StepArtifacts]:
    """Train the step-``step`` model from the previous one. Evaluation is done by the caller."""
    graph, schedule = data.bundle_info
    data.begin_step(step)
    split = data.train(step)
    group = schedule.groups[step]
    check_no_leakage(split, group, step)
    method = cfg.method
    artifacts = StepArtifacts()

    old_channels = output_keypoints(schedule.groups, step - 1)
    new_channels = list(group)
    images = _images(split)
    teacher = snapshot_frozen(prev)
    grid = prev.heatmap_size
    v_old, y_old = infer(teacher, images)
    targets, mask = _targets(split, new_channels, grid, cfg.heatmap_sigma)

    use_ka = method in ("kamp", "kamp_random_kanet") and cfg.stage1
    ka_teacher = ka_channel = None
    if use_ka:
        if method == "kamp":
            task = create_task(graph, old_channels, new_channels, seed=derive_seed(seed, step, "task"), mode=cfg.task_mode)
        else:
            task = random_task(old_channels, new_channels, derive_seed(seed, step, "task"))
        artifacts.task = task
        src_a, src_b = _association_inputs(task, split, y_old, old_channels, grid, cfg.heatmap_sigma)
        ka_channel = old_channels.index(task.target_old)
        pseudo = y_old[:, ka_channel : ka_channel + 1]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, step, "kanet_init"))
            net = KANet(v_old.shape[1], cfg.ka_width)
        kanet, ka_log = train_kanet(
            net,
            src_a,
            src_b,
            v_old,
            pseudo,
            cfg.epochs_stage1,
            optimizer=cfg.optimizer,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            batch_size=cfg.batch_size,
            seed=derive_seed(seed, step, "kanet_order"),
        )
        artifacts.kanet, artifacts.kanet_log = kanet, ka_log
        ka_teacher = predict(kanet, src_a, src_b, v_old)

    model = grow(prev, len(group), derive_seed(seed, step, "head"))
    alpha = 0.0 if method == "finetune" else cfg.alpha
    distill = {"lwf": "channel", "finetune": None}.get(method, "spatial")
    artifacts.losses = _fit(
        model,
        images,
        targets,
        mask,
        slice(len(old_channels), len(old_channels) + len(group)),
        cfg,
        cfg.stage2_epochs,
        derive_seed(seed, step, "order"),
        alpha=alpha,
        teacher_old=y_old,
        distill=distill,
        ka_channel=ka_channel,
        ka_teacher=ka_teacher,
    )
    return model, artifacts


def association_diagnostic(
    kanet: KANet, task: KATaskSpec, teacher: IncrementalModel, test: SplitArrays, old_channels: list[int], cfg: RunConfig
) -> dict[str, float]:
    """Held-out PCK of the association net vs the frozen old model on the target keypoint."""
    images = _images(test)
    v, y = infer(teacher, images)
    src_a, src_b = _association_inputs(task, test, y, old_channels, teacher.heatmap_size, cfg.heatmap_sigma)
    ka_out = predict(kanet, src_a, src_b, v)
    ch = old_channels.index(task.target_old)
    return {
        "ka_target_pck": _target_pck(ka_out[:, 0], test, task.target_old, cfg.pck_sigma),
        "old_target_pck": _target_pck(y[:, ch], test, task.target_old, cfg.pck_sigma),
    }


def run_protocol(
    bundle: DatasetBundle,
    cfg: RunConfig,
    seed: int | None = None,
    initial_model: IncrementalModel | None = None,
    state: ProtocolState | None = None,
    on_step: Callable[[ProtocolState, StepArtifacts], None] | None = None,
) -> list[StepReport]:
    """Run Step-0 and every incremental step for one seed; returns one report per step.

    ``initial_model`` reuses an already trained Step-0 model; ``state`` resumes after its
    step. ``on_step`` is called after every completed step (checkpointing hook).
    """
    seed = cfg.seeds[0] if seed is None else seed
    schedule = bundle.schedule
    data = ProtocolData(bundle)
    test = bundle.test

    if cfg.method == "joint":
        return [_run_joint(bundle, data, cfg, seed, on_step)]

    if state is None:
        data.begin_step(0)
        model = initial_model if initial_model is not None else train_initial(data, cfg, seed)
        acc = AccuracyMatrix(cfg.metric)
        initial: dict[int, float] = {}
        scores = evaluate(model, test, output_keypoints(schedule.groups, 0), cfg.pck_sigma)
        report = build_report(0, scores, list(schedule.groups), acc, initial, _mre_extra(scores, schedule, 0))
        state = ProtocolState(0, model, acc, initial, [report])
        _log_report(cfg, seed, report)
        if on_step:
            on_step(state, StepArtifacts())

    for step in range(state.step + 1, schedule.n_steps):
        prev = state.model
        model, artifacts = run_step(prev, data, step, cfg, seed)
        scores = evaluate(model, test, output_keypoints(schedule.groups, step), cfg.pck_sigma)
        extras = _mre_extra(scores, schedule, step)
        if artifacts.kanet is not None:
            extras.update(
                association_diagnostic(
                    artifacts.kanet, artifacts.task, snapshot_frozen(prev), test, output_keypoints(schedule.groups, step - 1), cfg
                )
            )
            extras["ka_target"] = artifacts.task.target_old
            extras["kanet_loss_initial"] = artifacts.kanet_log.initial
            extras["kanet_loss_final"] = artifacts.kanet_log.final
        report = build_report(step, scores, list(schedule.groups), state.acc, state.initial, extras)
        state = ProtocolState(step, model, state.acc, state.initial, state.reports + [report])
        _log_report(cfg, seed, report)
        if on_step:
            on_step(state, artifacts)
    return state.reports


def _mre_extra(scores, schedule, step) -> dict[str, float]:
    return {"a_mre": scores.pooled(output_keypoints(schedule.groups, step), "mre")}


def _log_report(cfg: RunConfig, seed: int, report: StepReport) -> None:
    log.info(
        "%s seed=%d step=%d overall=%.2f at=%s mt=%s",
        cfg.method,
        seed,
        report.step,
        report.overall,
        "-" if report.at is None else f"{report.at:.2f}",
        "-" if report.mt is None else f"{report.mt:.2f}",
    )


def _run_joint(bundle: DatasetBundle, data: ProtocolData, cfg: RunConfig, seed: int, on_step) -> StepReport:
    """Upper bound: one model trained from scratch on the union of every step's labels."""
    schedule = bundle.schedule
    split = data.joint_train()
    keypoints = output_keypoints(schedule.groups, schedule.n_steps - 1)
    model = IncrementalModel(
        [len(g) for g in schedule.groups],
        tuple(split.images.shape[-2:]),
        cfg.model_width,
        cfg.feature_channels,
        cfg.head_hidden,
        seed=derive_seed(seed, 0, "init"),
    )
    targets, mask = _targets(split, keypoints, model.heatmap_size, cfg.heatmap_sigma)
    history = _fit(model, _images(split), targets, mask, slice(0, len(keypoints)), cfg, cfg.initial_epochs, derive_seed(seed, 0, "order"), stage="joint")
    scores = evaluate(model, bundle.test, keypoints, cfg.pck_sigma)
    last = schedule.n_steps - 1
    report = StepReport(
        last,
        cfg.metric,
        scores.pooled(keypoints, cfg.metric),
        None,
        None,
        {k: scores.value(k, cfg.metric) for k in keypoints},
        {j: scores.pooled(schedule.groups[j], cfg.metric) for j in range(schedule.n_steps)},
        _mre_extra(scores, schedule, last),
    )
    if on_step:
        on_step(ProtocolState(last, model, AccuracyMatrix(cfg.metric), {}, [report]), StepArtifacts(losses=history))
    return report


def aggregate(reports_by_seed: dict[int, list[StepReport]]) -> list[dict]:
    """Mean and standard deviation per step of overall, AT and MT across seeds."""
    rows = []
    n_steps = min(len(r) for r in reports_by_seed.values())
    for i in range(n_steps):
        row = {"step": next(iter(reports_by_seed.values()))[i].step, "n_seeds": len(reports_by_seed)}
        for name in ("overall", "at", "mt"):
            vals = [getattr(r[i], name) for r in reports_by_seed.values()]
            vals = [v for v in vals if v is not None and not math.isnan(v)]
            row[name] = statistics.fmean(vals) if vals else None
            row[f"{name}_std"] = statistics.pstdev(vals) if len(vals) > 1 else (0.0 if vals else None)
        rows.append(row)
    return rows
