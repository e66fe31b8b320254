"""INI-style run configuration: one section per concern, flat key = value pairs."""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import typing
from dataclasses import asdict
from pathlib import Path

from .trainer import RunConfig

SECTIONS = {
    "protocol": ("method", "seeds", "metric", "task_mode", "stage1"),
    "optim": (
        "optimizer",
        "lr",
        "momentum",
        "weight_decay",
        "lr_decay_at",
        "batch_size",
        "epochs_total",
        "epochs_stage1",
        "epochs_initial",
    ),
    "loss": ("alpha", "ksd_axes", "ka_loss", "ka_reduction", "heatmap_sigma"),
    "model": ("model_width", "feature_channels", "head_hidden", "ka_width"),
    "eval": ("pck_sigma",),
}

_HINTS = typing.get_type_hints(RunConfig)


def _section_of(name: str) -> str:
    for section, names in SECTIONS.items():
        if name in names:
            return section
    raise KeyError(name)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name: str, raw: str):
    hint = _HINTS[name]
    raw = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if raw == "" or raw.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    if typing.get_origin(hint) is tuple:
        item = typing.get_args(hint)[0]
        return tuple(item(p.strip()) for p in raw.split(",") if p.strip())
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    try:
        return hint(raw)
    except ValueError as exc:
        raise ValueError(f"{name}: cannot parse {raw!r} as {hint.__name__}") from exc


def to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, names in SECTIONS.items():
        parser[section] = {n: _format(getattr(cfg, n)) for n in names}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse a config file body; ``overrides`` (already typed) take precedence."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse(key, raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return from_ini(text, overrides)


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of every setting except the seed list."""
    d = asdict(cfg)
    d.pop("seeds")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

