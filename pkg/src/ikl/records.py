"""On-disk layout of a run directory: manifest, metrics/loss records, checkpoints, lock.

RUNDIR/
  manifest.json      config, config hash, dataset descriptor, run id, per-seed progress
  config.ini         the effective configuration
  metrics.jsonl      one object per (method, seed, step, metric)
  losses.jsonl       per-iteration loss terms
  checkpoints/       seed<S>_step<T>.pt
  .lock              held while a process writes to the directory
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
from pathlib import Path

from .metrics import AccuracyMatrix, StepReport
from .model import load_checkpoint, save_checkpoint
from .trainer import ProtocolState, StepArtifacts

SCHEMA_VERSION = 1


class RunLockedError(RuntimeError):
    pass


class ManifestError(RuntimeError):
    pass


def run_id(config_hash: str, dataset: dict, seeds) -> str:
    payload = json.dumps({"config": config_hash, "dataset": dataset, "seeds": list(seeds)}, sort_keys=True)
    return hashlib.sha1(payload.encode()).hexdigest()[:12]


def metric_records(method: str, seed: int, report: StepReport) -> list[dict]:
    """Flatten a step report into record lines with stable ids."""
    overall = "aaa" if report.kind == "pck" else "a_mre"
    values: list[tuple[str, float | None]] = [(overall, report.overall), ("at", report.at), ("mt", report.mt)]
    values += [(f"group_{j}", v) for j, v in sorted(report.group_accuracy.items())]
    values += [(f"{report.kind}_kp{k}", v) for k, v in sorted(report.per_keypoint.items())]
    values += [(name, v) for name, v in sorted(report.extras.items()) if name != overall]
    out = []
    for name, value in values:
        out.append(
            {
                "schema": SCHEMA_VERSION,
                "record_id": f"{method}/s{seed}/t{report.step}/{name}",
                "method": method,
                "seed": seed,
                "step": report.step,
                "metric": name,
                "value": None if value is None else float(value),
            }
        )
    return out


def report_from_records(records: list[dict], kind: str = "pck") -> StepReport:
    """Rebuild a step report from its record lines (inverse of ``metric_records``)."""
    by = {r["metric"]: r["value"] for r in records}
    overall = "aaa" if kind == "pck" else "a_mre"
    per_kp = {int(m.rsplit("kp", 1)[1]): v for m, v in by.items() if m.startswith(f"{kind}_kp")}
    groups = {int(m.split("_")[1]): v for m, v in by.items() if m.startswith("group_")}
    skip = {overall, "at", "mt"}
    extras = {m: v for m, v in by.items() if m not in skip and not m.startswith(("group_", f"{kind}_kp"))}
    return StepReport(records[0]["step"], kind, by[overall], by.get("at"), by.get("mt"), per_kp, groups, extras)


def read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _append_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


class RunDirectory:
    """Writer side of a run directory. Use as a context manager to hold the lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock_fh = None

    # -- paths
    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.jsonl"

    @property
    def losses_path(self) -> Path:
        return self.path / "losses.jsonl"

    def checkpoint_path(self, seed: int, step: int) -> Path:
        return self.path / "checkpoints" / f"seed{seed}_step{step}.pt"

    # -- locking
    def __enter__(self) -> RunDirectory:
        self.path.mkdir(parents=True, exist_ok=True)
        fh = open(self.path / ".lock", "w")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fh.close()
            raise RunLockedError(f"{self.path} is in use by another process") from None
        self._lock_fh = fh
        return self

    def __exit__(self, *exc) -> None:
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    # -- manifest
    def read_manifest(self) -> dict | None:
        if not self.manifest_path.exists():
            return None
        try:
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"corrupt manifest {self.manifest_path}: {exc}") from exc

    def write_manifest(self, manifest: dict) -> None:
        _write_atomic(self.manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def init_manifest(self, method: str, cfg_hash: str, config_ini: str, dataset: dict, seeds) -> dict:
        """Create a fresh manifest, or validate and return the existing one for resuming."""
        existing = self.read_manifest()
        if existing is not None:
            if existing.get("schema") != SCHEMA_VERSION:
                raise ManifestError(f"unsupported manifest schema {existing.get('schema')}")
            if existing["config_hash"] != cfg_hash or existing["dataset"] != dataset or existing["method"] != method:
                raise ManifestError(f"{self.path} holds a different run; choose another output directory")
            for s in seeds:
                existing["seeds"].setdefault(str(s), {"completed_step": -1, "checkpoints": {}, "tasks": {}, "done": False})
            self.write_manifest(existing)
            self._prune_records(existing)
            return existing
        (self.path / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.path / "config.ini").write_text(config_ini, encoding="utf-8")
        manifest = {
            "schema": SCHEMA_VERSION,
            "run_id": run_id(cfg_hash, dataset, seeds),
            "method": method,
            "config_hash": cfg_hash,
            "dataset": dataset,
            "seeds": {str(s): {"completed_step": -1, "checkpoints": {}, "tasks": {}, "done": False} for s in seeds},
        }
        for p in (self.metrics_path, self.losses_path):
            p.unlink(missing_ok=True)
        self.write_manifest(manifest)
        return manifest

    def _prune_records(self, manifest: dict) -> None:
        """Drop record lines written after the last step the manifest marks complete."""
        done = {int(s): v["completed_step"] for s, v in manifest["seeds"].items()}
        for path in (self.metrics_path, self.losses_path):
            rows = [r for r in read_jsonl(path) if r["step"] <= done.get(r["seed"], -1)]
            _write_atomic(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))

    # -- per-step commit
    def commit_step(self, manifest: dict, method: str, seed: int, state: ProtocolState, artifacts: StepArtifacts, last_step: int) -> None:
        """Persist one finished step: records, then checkpoint, then the manifest.

        The manifest is written last, so a crash leaves the step uncommitted and the
        extra lines are pruned on resume.
        """
        report = state.reports[-1]
        step = report.step
        _append_jsonl(self.metrics_path, metric_records(method, seed, report))
        _append_jsonl(
            self.losses_path,
            [{"schema": SCHEMA_VERSION, "method": method, "seed": seed, "step": step, **row} for row in artifacts.losses],
        )
        ckpt = self.checkpoint_path(seed, step)
        extra = {
            "seed": seed,
            "method": method,
            "acc": {f"{i},{j}": v for (i, j), v in state.acc.values.items()},
            "acc_kind": state.acc.kind,
            "initial": {str(k): v for k, v in state.initial.items()},
            "reports": [r.to_dict() for r in state.reports],
        }
        if artifacts.task is not None:
            extra["task"] = artifacts.task.to_dict()
        save_checkpoint(ckpt, state.model, extra=extra, kanet=artifacts.kanet)
        entry = manifest["seeds"][str(seed)]
        entry["completed_step"] = step
        entry["checkpoints"][str(step)] = str(ckpt.relative_to(self.path))
        if artifacts.task is not None:
            entry["tasks"][str(step)] = artifacts.task.to_dict()
        entry["done"] = step >= last_step
        self.write_manifest(manifest)

    def resume_state(self, manifest: dict, seed: int) -> ProtocolState | None:
        """Protocol state after the last committed step of ``seed``, or None to start over."""
        entry = manifest["seeds"][str(seed)]
        step = entry["completed_step"]
        if step < 0:
            return None
        path = self.path / entry["checkpoints"][str(step)]
        model, extra, _ = load_checkpoint(path)
        acc = AccuracyMatrix(extra["acc_kind"])
        for key, v in extra["acc"].items():
            i, j = (int(x) for x in key.split(","))
            acc[i, j] = v
        initial = {int(k): v for k, v in extra["initial"].items()}
        reports = [StepReport.from_dict(d) for d in extra["reports"]]
        return ProtocolState(step, model, acc, initial, reports)
