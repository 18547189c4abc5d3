"""Flat ``section.key = value`` experiment configuration.

Lines starting with ``#`` (or trailing ``# ...``) are comments.  Every key has
a default; unknown keys are rejected.  Values are parsed by the type of the
default they replace.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import DataConfig
from .model import EncoderConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_families: int = 2
    langs_per_family: int = 4
    n_new_langs: int = 2
    minutes_scale: float = 1 / 6


@dataclass
class AnalysisConfig:
    n_parts: int = 4
    permutations: int = 1000
    binary_features: bool = False
    standardize: bool = False


def _adapt_defaults() -> TrainConfig:
    return TrainConfig(stage="low_resource", iterations=1000, lr=2e-3, alpha=1.0, beta=1, eval_interval=1000)


def _ft_defaults() -> TrainConfig:
    return TrainConfig(stage="further_mask_ft", iterations=500, lr=2e-3, alpha=1.0, beta=1, eval_interval=500)


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_dir: str = ""
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    adapt: TrainConfig = field(default_factory=_adapt_defaults)
    ft: TrainConfig = field(default_factory=_ft_defaults)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def seeded(self) -> "ExperimentConfig":
        """Copy with every stage seed derived from the top-level seed."""
        return replace(
            self,
            trainer=replace(self.trainer, seed=self.seed),
            adapt=replace(self.adapt, seed=self.seed),
            ft=replace(self.ft, seed=self.seed),
        )


SECTIONS = ("world", "data", "model", "trainer", "adapt", "ft", "analysis")
TOP_LEVEL = ("seed", "data_dir")


def _parse_value(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    updates: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    top: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in TOP_LEVEL:
            top[key] = _parse_value(raw, getattr(cfg, key), key)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        sub = getattr(cfg, section)
        names = {f.name for f in fields(sub)}
        if name not in names:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        updates[section][name] = _parse_value(raw, getattr(sub, name), key)
    try:
        kwargs = {s: replace(getattr(cfg, s), **updates[s]) for s in SECTIONS}
        return replace(cfg, **top, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    return parse_config(path.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key with its value, one per line, in a fixed order."""
    lines = [f"{k} = {_format_value(getattr(cfg, k))}" for k in TOP_LEVEL]
    for s in SECTIONS:
        sub = getattr(cfg, s)
        lines.extend(f"{s}.{f.name} = {_format_value(getattr(sub, f.name))}" for f in fields(sub))
    return "\n".join(lines) + "\n"
