"""Command line entry point: ``ikl generate | run | report``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

OUTPUT_ROOT_ENV = "IKL_OUTPUT_ROOT"
DEFAULT_ROOT = "ikl_output"

log = logging.getLogger("ikl")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_ROOT))


def _resolve(path: str | None, default: str) -> Path:
    """Relative paths land under the output root; absolute ones are used as given."""
    p = Path(path) if path else Path(default)
    return p if p.is_absolute() else output_root() / p


def _existing(path: str) -> Path:
    """Input paths: as given if they exist, otherwise looked up under the output root."""
    p = Path(path)
    return p if p.is_absolute() or p.exists() else output_root() / p


class _StopRequested(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _sizes(text: str, n_steps: int, name: str) -> tuple[int, ...]:
    values = _int_list(text)
    if len(values) == 1:
        values = values * n_steps
    if len(values) != n_steps:
        raise ValueError(f"--{name} needs one value or one per step ({n_steps}), got {len(values)}")
    return tuple(values)


def cmd_generate(args) -> int:
    from .synthdata import KeypointSchedule, SplitSizes, build_default_anatomy, make_split, save_bundle

    graph = build_default_anatomy(args.keypoints)
    schedule = KeypointSchedule.from_sizes(args.groups, args.keypoints, seed=args.seed)
    n = schedule.n_steps
    sizes = SplitSizes(
        _sizes(args.train_sizes, n, "train-sizes"),
        _sizes(args.val_sizes, n, "val-sizes"),
        _sizes(args.test_sizes, n, "test-sizes"),
    )
    bundle = make_split(graph, schedule, sizes, seed=args.seed, img_size=(args.img_size, args.img_size))
    out = save_bundle(bundle, _resolve(args.out, "data"))
    print(out)
    return 0


def _overrides(args) -> dict:
    keys = ("method", "alpha", "optimizer", "lr", "epochs_total", "epochs_stage1", "epochs_initial", "batch_size", "task_mode")
    out = {k: getattr(args, k) for k in keys}
    if args.seeds is not None:
        out["seeds"] = tuple(args.seeds)
    if args.no_stage1:
        out["stage1"] = False
    return out


def cmd_run(args) -> int:
    from .config import config_hash, load_config, to_ini
    from .records import RunDirectory
    from .synthdata import load_bundle
    from .trainer import aggregate, run_protocol

    cfg = load_config(args.config, _overrides(args))
    data_dir = _existing(args.data)
    bundle = load_bundle(data_dir)
    dataset = {"path": str(data_dir.resolve()), **{k: v for k, v in bundle.meta().items() if k != "graph"}}
    run_dir = _resolve(args.out, f"runs/{cfg.method}")
    last = bundle.schedule.n_steps - 1
    with RunDirectory(run_dir) as rd:
        manifest = rd.init_manifest(cfg.method, config_hash(cfg), to_ini(cfg), dataset, cfg.seeds)
        results = {}
        for seed in cfg.seeds:
            entry = manifest["seeds"][str(seed)]
            state = rd.resume_state(manifest, seed)
            if entry["done"]:
                results[seed] = state.reports
                log.info("seed %d already complete", seed)
                continue
            if state is not None:
                log.info("seed %d resuming after step %d", seed, state.step)

            def on_step(st, artifacts, seed=seed):
                step = st.reports[-1].step
                rd.commit_step(manifest, cfg.method, seed, st, artifacts, last)
                if args.stop_after is not None and step >= args.stop_after and step < last:
                    raise _StopRequested

            try:
                results[seed] = run_protocol(bundle, cfg, seed, state=state, on_step=on_step)
            except _StopRequested:
                print(f"stopped after step {args.stop_after}; rerun the same command to resume")
                return 0
    for row in aggregate(results):
        parts = [f"step {row['step']}"]
        for name in ("overall", "at", "mt"):
            v, s = row[name], row[f"{name}_std"]
            parts.append(f"{name}=" + ("-" if v is None else f"{v:.2f}±{s:.2f}"))
        print("  ".join(parts))
    print(run_dir)
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    written = write_report([_existing(r) for r in args.runs], _resolve(args.out, "report"), plots=not args.no_plots)
    print(written["txt"].read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ikl", description="Incremental keypoint learning benchmark.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset bundle")
    g.add_argument("--keypoints", type=int, default=12)
    g.add_argument("--groups", type=_int_list, default=[4, 2, 2, 2, 2], help="keypoints per step, e.g. 4,2,2,2,2")
    g.add_argument("--train-sizes", default="300", help="one value or one per step")
    g.add_argument("--val-sizes", default="0")
    g.add_argument("--test-sizes", default="100")
    g.add_argument("--img-size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"bundle directory (relative paths go under ${OUTPUT_ROOT_ENV})")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="train one method through every step")
    r.add_argument("--data", required=True, help="dataset bundle directory")
    r.add_argument("--config", help="INI config file; flags override it")
    r.add_argument("--method")
    r.add_argument("--alpha", type=float)
    r.add_argument("--optimizer", choices=("sgd", "adam"))
    r.add_argument("--lr", type=float)
    r.add_argument("--epochs-total", dest="epochs_total", type=int)
    r.add_argument("--epochs-stage1", dest="epochs_stage1", type=int)
    r.add_argument("--epochs-initial", dest="epochs_initial", type=int)
    r.add_argument("--batch-size", dest="batch_size", type=int)
    r.add_argument("--task-mode", dest="task_mode", choices=("nearest", "random_pool"))
    r.add_argument("--no-stage1", action="store_true", help="skip the association stage")
    r.add_argument("--seeds", type=_int_list)
    r.add_argument("--out", help="run directory (relative paths go under the output root)")
    r.add_argument("--stop-after", type=int, help="stop after committing this step; rerun to resume")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="tables and plots from run directories")
    rep.add_argument("--runs", nargs="+", required=True)
    rep.add_argument("--out")
    rep.add_argument("--no-plots", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
