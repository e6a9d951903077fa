"""Run configuration and its canonical text form.

The text form is an INI-style file with sections ``[model] [schedule] [train]
[data] [sample]`` preceded by a version header line. Keys not given fall back
to defaults; ``to_text`` always writes every key in a fixed order, so
``from_text(to_text(cfg)) == cfg``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .data import SyntheticSpec, build
from .denoiser import PRESETS, DenoiserConfig
from .errors import FormatError
from .sampler import SampleConfig
from .schedule import Schedule
from .trainer import TrainConfig

HEADER = "# vqlcmd config v1"


@dataclass(frozen=True)
class DataConfig:
    kind: str = "factorized"
    M: int = 16
    K: int = 8
    seed: int = 0
    concentration: float = 0.5
    width: int = 4  # markov-grid
    stickiness: float = 0.7  # markov-grid
    num_templates: int = 4  # template-mixture
    corruption: float = 0.1  # template-mixture

    def build(self) -> SyntheticSpec:
        if self.kind == "factorized":
            return build(self.kind, self.M, self.K, self.seed, concentration=self.concentration)
        if self.kind == "markov-grid":
            return build(
                self.kind, self.M, self.K, self.seed,
                width=self.width, stickiness=self.stickiness, concentration=self.concentration,
            )
        return build(
            self.kind, self.M, self.K, self.seed,
            num_templates=self.num_templates, corruption=self.corruption,
        )


@dataclass(frozen=True)
class ModelSection:
    preset: str = "desk"
    layers: int = 4
    heads: int = 4
    width: int = 128
    D: int = 16
    num_classes: int = 0
    attn_dropout_rate: float = 0.1
    mlp_ratio: int = 4
    use_pos_emb: bool = True
    zero_init_adaln: bool = True


@dataclass(frozen=True)
class ScheduleSection:
    shift: float = 0.0
    t_min: float = 1e-5
    t_max: float = 1.0 - 1e-5


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def denoiser_config(self) -> DenoiserConfig:
        m = self.model
        return DenoiserConfig(
            layers=m.layers, heads=m.heads, width=m.width, D=m.D, K=self.data.K, M=self.data.M,
            num_classes=m.num_classes, attn_dropout_rate=m.attn_dropout_rate, mlp_ratio=m.mlp_ratio,
            use_pos_emb=m.use_pos_emb, zero_init_adaln=m.zero_init_adaln,
        )

    def schedule_obj(self) -> Schedule:
        s = self.schedule
        return Schedule(shift=s.shift, t_min=s.t_min, t_max=s.t_max)

    def with_section(self, name: str, **changes) -> "RunConfig":
        return replace(self, **{name: replace(getattr(self, name), **changes)})

    def to_text(self) -> str:
        lines = [HEADER]
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        first = text.lstrip().splitlines()[0] if text.strip() else ""
        if first.strip() != HEADER:
            raise FormatError(f"config must start with {HEADER!r}, got {first!r}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (D, K, M)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise FormatError(str(exc)) from exc
        unknown = set(parser.sections()) - {f.name for f in fields(cls)}
        if unknown:
            raise FormatError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for sec in fields(cls):
            default = sec.default_factory()
            if sec.name == "model" and parser.has_option("model", "preset"):
                default = _model_preset(parser.get("model", "preset"))
            values = dict(parser.items(sec.name)) if parser.has_section(sec.name) else {}
            sections[sec.name] = _parse_section(default, values, sec.name)
        return cls(**sections)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _model_preset(name: str) -> ModelSection:
    if name not in PRESETS:
        raise FormatError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    return ModelSection(
        preset=name, layers=p.layers, heads=p.heads, width=p.width, D=p.D, num_classes=p.num_classes,
        attn_dropout_rate=p.attn_dropout_rate, mlp_ratio=p.mlp_ratio, use_pos_emb=p.use_pos_emb,
        zero_init_adaln=p.zero_init_adaln,
    )


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_section(default, values: dict, section: str):
    known = {f.name: f for f in fields(default)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise FormatError(f"unknown key {key!r} in [{section}]")
        current = getattr(default, key)
        try:
            if isinstance(current, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                changes[key] = raw.lower() in ("true", "1", "yes")
            elif isinstance(current, int):
                changes[key] = int(raw)
            elif isinstance(current, float):
                changes[key] = float(raw)
            else:
                changes[key] = raw.strip()
        except ValueError as exc:
            raise FormatError(f"bad value for [{section}] {key}: {raw!r}") from exc
    try:
        return replace(default, **changes)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid [{section}] section: {exc}") from exc
