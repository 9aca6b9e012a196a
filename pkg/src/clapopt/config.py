"""Run-level configuration: one object unifying planner, generator and
training parameters plus pipeline knobs, with a flat text format and
dotted-path overrides for CLI flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .planner import PlannerConfig
from .synth import RoadblockSpec
from .textio import atomic_write_text, fmt_float, read_text
from .train import TrainConfig

CONFIG_SCHEMA = "clap-config v1"


def _default_train() -> TrainConfig:
    # the out-of-box recipe: short prompts and a faster step size; the
    # toy planner's attention field is small enough that long prompts
    # drown the visual tokens and destabilize normal-frame behavior
    return TrainConfig(m=8, n=8, lr=0.03)


@dataclass(frozen=True)
class RunConfig:
    dataset_seed: int = 7
    n_roadblocks: int = 4
    delta: float = 0.5
    radius: float = 25.0
    shift_seed: int = 0
    notice_tokens: tuple = (7, 11)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    spec: RoadblockSpec = field(default_factory=RoadblockSpec)
    train: TrainConfig = field(default_factory=_default_train)

    def __post_init__(self) -> None:
        if self.n_roadblocks < 1:
            raise ValueError("n_roadblocks must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        for name in ("feature_dim", "l_instr", "vocab_size", "waypoint_count", "dt"):
            p, s = getattr(self.planner, name), getattr(self.spec, name)
            if p != s:
                raise ValueError(f"planner.{name}={p} != spec.{name}={s}")
        for t in self.notice_tokens:
            if not 0 <= int(t) < self.planner.vocab_size:
                raise ValueError(f"notice token {t} outside vocab")
        if self.train.extract_layer > self.planner.n_layers:
            raise ValueError("train.extract_layer beyond planner depth")


_SECTIONS = ("planner", "spec", "train")


def _fmt_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return fmt_float(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt_value(v) for v in value)
    return str(value)


def _parse_like(template, raw: str):
    if raw == "none":
        return None
    if isinstance(template, bool):
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    if isinstance(template, int) and not isinstance(template, bool):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        parts = [] if raw == "" else raw.split(",")
        inner = template[0] if template else 0
        return tuple(_parse_like(inner, p) for p in parts)
    if template is None:
        # batch_size-style optionals carry ints when present
        return int(raw)
    return raw


def config_to_text(config: RunConfig) -> str:
    lines = [CONFIG_SCHEMA]
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in _SECTIONS:
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name} {_fmt_value(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name} {_fmt_value(value)}")
    lines.sort(key=lambda s: (s != CONFIG_SCHEMA, s))
    return "\n".join(lines) + "\n"


def write_config(config: RunConfig, path: str) -> None:
    atomic_write_text(path, config_to_text(config))


def apply_override(config: RunConfig, path: str, raw: str) -> RunConfig:
    """Set one dotted-path field from its text form, e.g. train.tau=0.05."""
    head, _, tail = path.partition(".")
    if head in _SECTIONS:
        if not tail:
            raise KeyError(f"{head} needs a field, e.g. {head}.m")
        section = getattr(config, head)
        if not any(f.name == tail for f in fields(section)):
            raise KeyError(f"unknown config key {path!r}")
        template = getattr(section, tail)
        new_section = dataclasses.replace(section, **{tail: _parse_like(template, raw)})
        return dataclasses.replace(config, **{head: new_section})
    if not any(f.name == path for f in fields(config)):
        raise KeyError(f"unknown config key {path!r}")
    template = getattr(config, path)
    return dataclasses.replace(config, **{path: _parse_like(template, raw)})


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    lines = text.splitlines()
    if not lines or lines[0] != CONFIG_SCHEMA:
        raise ValueError(f"expected header {CONFIG_SCHEMA!r}")
    config = base if base is not None else RunConfig()
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        key, sep, raw = line.partition(" ")
        if not sep:
            raise ValueError(f"line {i}: expected 'key value'")
        config = apply_override(config, key, raw)
    return config


def read_config(path: str) -> RunConfig:
    return parse_config(read_text(path))
