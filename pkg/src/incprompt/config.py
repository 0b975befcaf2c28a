"""Experiment configuration: TOML file -> validated :class:`ExperimentConfig`.

Precedence, lowest to highest: built-in defaults, the config file, the
``INCPROMPT_OUTPUT_ROOT`` environment variable (prefixes a relative
``output_dir``), command-line overrides.
"""
from __future__ import annotations

import copy
import os
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import BackboneConfig, PromptSchedule
from .data import SplitSpec
from .errors import ConfigError
from .key_learner import KeyLossConfig
from .trainer import METHODS, TrainConfig

OUTPUT_ROOT_ENV = "INCPROMPT_OUTPUT_ROOT"

_TOP_LEVEL = {"method", "seed", "output_dir", "backbone", "schedule", "key", "split", "synthetic", "train"}
_SCHEDULE_KEYS = {"depth", "layers", "prompt_length"}
_SPLIT_KEYS = {f.name for f in fields(SplitSpec)} | {"root"}


@dataclass(frozen=True)
class SyntheticConfig:
    dim: int = 16
    samples_per_class: int = 200
    test_samples_per_class: int = 100
    separation: float = 10.0
    noise: float = 1.0

    def __post_init__(self):
        if self.dim < 1 or self.samples_per_class < 1 or self.test_samples_per_class < 1:
            raise ConfigError("synthetic dim and sample counts must be >= 1")
        if self.separation < 0 or self.noise < 0:
            raise ConfigError("synthetic separation and noise must be >= 0")


class ConfigFieldError(ConfigError):
    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...] = ("incprompt", "ftseq", "upper_bound")
    seed: int = 0
    output_dir: str = "runs/default"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    schedule: PromptSchedule = field(default_factory=lambda: PromptSchedule.from_depth(4, 4))
    key: KeyLossConfig = field(default_factory=KeyLossConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    data_root: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        split = asdict(self.split)
        if self.data_root is not None:
            split["root"] = self.data_root
        return {
            "method": list(self.methods),
            "seed": self.seed,
            "output_dir": self.output_dir,
            "backbone": asdict(self.backbone),
            "schedule": {"layers": list(self.schedule.layers), "prompt_length": self.schedule.prompt_length},
            "key": asdict(self.key),
            "split": split,
            "synthetic": asdict(self.synthetic),
            "train": {k: v for k, v in asdict(self.train).items() if v is not None},
        }


def _section(raw: dict, name: str, cls, allowed: set[str] | None = None) -> Any:
    data = raw.get(name, {})
    if not isinstance(data, dict):
        raise ConfigFieldError(name, "must be a table")
    allowed = allowed if allowed is not None else {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigFieldError(f"{name}.{key}", "unknown field")
    return data


def _build(cls, path: str, data: dict):
    try:
        return cls(**data)
    except ConfigError as exc:
        # pin the message on the first field it mentions, else the section
        msg = str(exc)
        for key in sorted(data, key=len, reverse=True):
            if re.search(rf"\b{re.escape(key)}\b", msg):
                raise ConfigFieldError(f"{path}.{key}", msg) from exc
        raise ConfigFieldError(path, msg) from exc
    except TypeError as exc:
        raise ConfigFieldError(path, str(exc)) from exc


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed config mapping as a whole; unknown fields are errors."""
    for key in raw:
        if key not in _TOP_LEVEL:
            raise ConfigFieldError(key, "unknown field")
    methods = raw.get("method", list(ExperimentConfig.methods))
    if isinstance(methods, str):
        methods = [methods]
    if not methods or any(m not in METHODS for m in methods):
        raise ConfigFieldError("method", f"expected one or more of {METHODS}, got {methods!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigFieldError("seed", f"must be an integer, got {seed!r}")

    backbone = _build(BackboneConfig, "backbone", _section(raw, "backbone", BackboneConfig))
    sched = _section(raw, "schedule", PromptSchedule, _SCHEDULE_KEYS)
    if "depth" in sched and "layers" in sched:
        raise ConfigFieldError("schedule", "give either depth or layers, not both")
    length = sched.get("prompt_length", 4)
    if not isinstance(length, int) or length < 0:
        raise ConfigFieldError("schedule.prompt_length", f"must be an integer >= 0, got {length!r}")
    if "layers" in sched:
        layers = sched["layers"]
        if not isinstance(layers, list) or not all(isinstance(i, int) for i in layers):
            raise ConfigFieldError("schedule.layers", "must be a list of integers")
        bad = [i for i in layers if not 0 <= i < backbone.num_layers]
        if bad:
            raise ConfigFieldError("schedule.layers", f"{bad} outside [0, {backbone.num_layers})")
        schedule = PromptSchedule(tuple(layers), length)
    else:
        depth = sched.get("depth", backbone.num_layers)
        if not isinstance(depth, int) or not 0 <= depth <= backbone.num_layers:
            raise ConfigFieldError("schedule.depth", f"must be in [0, {backbone.num_layers}], got {depth!r}")
        schedule = PromptSchedule.from_depth(depth, length)

    key = _build(KeyLossConfig, "key", _section(raw, "key", KeyLossConfig))
    split_raw = dict(_section(raw, "split", SplitSpec, _SPLIT_KEYS))
    root = split_raw.pop("root", None)
    split = _build(SplitSpec, "split", split_raw)
    if split.source != "synthetic" and root is None:
        raise ConfigFieldError("split.root", f"required for source {split.source!r}")
    synthetic = _build(SyntheticConfig, "synthetic", _section(raw, "synthetic", SyntheticConfig))
    train = _build(TrainConfig, "train", _section(raw, "train", TrainConfig))
    output_dir = raw.get("output_dir", ExperimentConfig.output_dir)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigFieldError("output_dir", "must be a non-empty string")
    return ExperimentConfig(tuple(methods), seed, output_dir, backbone, schedule, key, split,
                            root, synthetic, train)


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values use TOML syntax, bare words are strings."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, value = item.split("=", 1)
        parts = path.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigFieldError(path, "cannot descend into a non-table value")
        node[parts[-1]] = _parse_value(value.strip())
    return raw


def locate(text: str, path: str) -> int | None:
    """1-based line where dotted ``path`` is set in TOML ``text``, if it can be found."""
    parts = path.split(".")
    section, key = (".".join(parts[:-1]), parts[-1])
    current = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if current == path:
                return lineno
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return lineno
    return None


def read_raw(path: str | Path) -> tuple[dict, str]:
    text = Path(path).read_text()
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: str | Path, overrides: list[str] | None = None,
                output_dir: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Read, override and validate. Errors carry ``file:line:`` when the field is in the file."""
    raw, text = read_raw(path)
    raw = apply_overrides(raw, overrides or [])
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = from_dict(raw)
    except ConfigFieldError as exc:
        line = locate(text, exc.path)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigFieldError(exc.path, f"{exc.message} ({where})") from exc
    out = output_dir or cfg.output_dir
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if output_dir is None and env_root and not Path(out).is_absolute():
        out = str(Path(env_root) / out)
    if out != cfg.output_dir:
        cfg = ExperimentConfig(**{**cfg.__dict__, "output_dir": out})
    return cfg
