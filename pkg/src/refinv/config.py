"""Key-value run configuration: parsing, validation, canonical serialization.

Grammar: one ``section.key = value`` per line, ``#`` starts a comment, blank
lines ignored. Values are coerced by the target field's type (ints, floats,
bools as true/false, tuples as comma-separated items, ``none`` for optional
fields). Unknown keys and coercion failures are reported with the offending
field name. The canonical serialization is the config copy written into every
run directory and the input of the config hash.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import AugmentationSpec
from .core import ScheduleConfig, config_hash
from .errors import ConfigError
from .toys import DenoiserTrainConfig, RefereeTrainConfig, ShapesDatasetSpec

EVAL_REFEREE_TRAIN_DEFAULTS = RefereeTrainConfig(width=20, feat=160, emb=40, gru=144)


@dataclass(frozen=True)
class RunOptions:
    variant: str = "combined"            # combined | referee-only | sds-only
    snapshot_every: int = 0
    dump_gradients: bool = False
    parallel: int = 1
    threads: int = 1
    sds_t_min: float = 0.02
    sds_t_max: float = 0.98
    referee_seed: int = 1
    eval_referee_seed: int = 2
    denoiser_seed: int = 3

    def validate(self) -> None:
        if self.variant not in ("combined", "referee-only", "sds-only"):
            raise ConfigError(f"run.variant must be combined/referee-only/sds-only, got {self.variant!r}")
        if self.parallel < 1 or self.threads < 1:
            raise ConfigError("run.parallel and run.threads must be >= 1")
        if not (0.0 <= self.sds_t_min < self.sds_t_max <= 1.0):
            raise ConfigError(f"need 0 <= run.sds_t_min < run.sds_t_max <= 1, got {self.sds_t_min}, {self.sds_t_max}")
        if self.snapshot_every < 0:
            raise ConfigError("run.snapshot_every must be >= 0")


@dataclass(frozen=True)
class EvalOptions:
    n_prompts: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    t_eval: int = 25
    n_mc: int = 4
    prompt_seed: int = 7

    def validate(self) -> None:
        if self.n_prompts < 1 or len(self.seeds) < 1:
            raise ConfigError("eval.n_prompts and eval.seeds must be non-empty")
        if self.t_eval < 1 or self.n_mc < 1:
            raise ConfigError("eval.t_eval and eval.n_mc must be >= 1")


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    dataset: ShapesDatasetSpec = field(default_factory=ShapesDatasetSpec)
    referee_train: RefereeTrainConfig = field(default_factory=RefereeTrainConfig)
    eval_referee_train: RefereeTrainConfig = field(default_factory=lambda: EVAL_REFEREE_TRAIN_DEFAULTS)
    denoiser_train: DenoiserTrainConfig = field(default_factory=DenoiserTrainConfig)
    run: RunOptions = field(default_factory=RunOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def validate(self) -> None:
        self.schedule.validate()
        self.augment.validate()
        self.dataset.validate()
        self.run.validate()
        self.eval.validate()

    # -- serialization

    def to_text(self) -> str:
        lines = ["# refinv run configuration (canonical form)"]
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            for f in fields(section):
                lines.append(f"{section_field.name}.{f.name} = {_format_value(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return config_hash(self.to_text())

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        cfg = self
        for key, raw in overrides.items():
            cfg = cfg._with_override(key, raw)
        return cfg

    def _with_override(self, key: str, raw: str) -> "RunConfig":
        if "." not in key:
            raise ConfigError(f"config key {key!r} must look like section.field")
        section_name, field_name = key.split(".", 1)
        section_fields = {f.name: f for f in fields(self)}
        if section_name not in section_fields:
            raise ConfigError(f"unknown config section {section_name!r} in {key!r}")
        section = getattr(self, section_name)
        sub_fields = {f.name: f for f in fields(section)}
        if field_name not in sub_fields:
            raise ConfigError(f"unknown field {key!r}")
        hints = typing.get_type_hints(type(section))
        try:
            value = _coerce(hints[field_name], raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"field {key!r}: cannot parse {raw!r} ({exc})") from exc
        new_section = dataclasses.replace(section, **{field_name: value})
        return dataclasses.replace(self, **{section_name: new_section})


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _coerce(field_type, raw: str) -> object:
    raw = raw.strip()
    origin = typing.get_origin(field_type)
    if origin is typing.Union:
        args = [a for a in typing.get_args(field_type) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        return _coerce(args[0], raw)
    if origin in (tuple, list):
        args = typing.get_args(field_type)
        item_type = args[0] if args else str
        items = [s for s in raw.split(",") if s.strip() != ""]
        return tuple(_coerce(item_type, s) for s in items)
    if field_type is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if field_type is int:
        return int(raw)
    if field_type is float:
        return float(raw)
    if field_type is str:
        return raw
    raise TypeError(f"unsupported field type {field_type}")


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        overrides[key.strip()] = raw.strip()
    return cfg.with_overrides(overrides)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg
