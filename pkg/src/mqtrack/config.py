"""Flat ``section.key = value`` run configuration.

Every field of the model, tracker, scene, loss and training settings has a
key; unspecified keys keep their defaults.  ``dump`` writes every key, so a
dumped file reloads to an identical configuration.  Example::

    # comments and blank lines are ignored
    model.d_model = 32
    tracker.mode = private_and_public
    tracker.kinds = pos,id,both,det
    train.iterations = 3000
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from mqtrack.losses import LossWeights
from mqtrack.model import Mode, ModelConfig, QueryKind
from mqtrack.scene import SceneConfig
from mqtrack.tracker import TrackerConfig
from mqtrack.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: "RunOptions" = field(default_factory=lambda: RunOptions())

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, scene=replace(self.scene, seed=seed), train=replace(self.train, seed=seed))


@dataclass(frozen=True)
class RunOptions:
    sequences: int = 1  # sequences written by ``simulate``
    public_frames: str = "all"  # "all" or "first": which frames receive public detections
    b2f_method: str = "track"
    b2f_overlap: float = 0.5
    b2f_id_thresh: float = 0.4
    b2f_fill: bool = True
    iou_thresh: float = 0.5

    def __post_init__(self):
        if self.public_frames not in ("all", "first"):
            raise ValueError("run.public_frames must be 'all' or 'first'")
        if self.b2f_method not in ("track", "id"):
            raise ValueError("run.b2f_method must be 'track' or 'id'")
        if self.sequences < 1:
            raise ValueError("run.sequences must be >= 1")


SECTIONS = ("model", "tracker", "scene", "loss", "train", "run")
_KIND_ORDER = (QueryKind.POS, QueryKind.ID, QueryKind.BOTH, QueryKind.DET)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, frozenset):
        return ",".join(k.value for k in _KIND_ORDER if k in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, Mode):
        return Mode.parse(text)
    if isinstance(default, frozenset):
        names = [t.strip() for t in text.split(",") if t.strip()]
        return frozenset(QueryKind(n) for n in names)
    return text


def dump(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in values or not name:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        values[section][name] = (value, line_no)
    defaults = RunConfig()
    built = {}
    for section in SECTIONS:
        base = getattr(defaults, section)
        known = {f.name for f in fields(base)}
        kwargs = {}
        for name, (value, line_no) in values[section].items():
            if name not in known:
                raise ConfigError(f"{source}:{line_no}: unknown key {section}.{name!r}")
            try:
                kwargs[name] = _parse(value, getattr(base, name))
            except ValueError as exc:
                raise ConfigError(f"{source}:{line_no}: {section}.{name}: {exc}") from None
        try:
            built[section] = replace(base, **kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: invalid {section} settings: {exc}") from None
    return RunConfig(**built)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return loads(path.read_text(encoding="utf-8"), str(path))


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump(cfg), encoding="utf-8")
