"""
Configuration handling for gradual-tta experiments.

This module defines the experiment configuration, its YAML form, dotted-key
overrides, method aliases and the shipped presets.
"""

from __future__ import annotations

import copy
import math
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from gradual_tta.bn_adapt import BNAdaptConfig
from gradual_tta.engine import AdaptConfig, AdaptMethod
from gradual_tta.errors import ConfigurationError
from gradual_tta.mixup import MixupConfig
from gradual_tta.models import CorruptionKind, ScheduleMode
from gradual_tta.self_training import SelfTrainingConfig
from gradual_tta.style_transfer import StyleConfig

__all__ = [
    "AdaptConfig",
    "BNAdaptConfig",
    "DatasetConfig",
    "ExperimentConfig",
    "METHOD_ALIASES",
    "MixupConfig",
    "PRESETS",
    "ScheduleConfig",
    "SelfTrainingConfig",
    "SourceTrainingConfig",
    "StyleConfig",
    "SweepConfig",
    "apply_overrides",
    "load_preset",
]


@dataclass
class DatasetConfig:
    """
    Synthetic dataset settings.

    Attributes:
        seed: Generation seed
        class_count: Number of classes
        train_samples: Source (training) images
        test_samples: Clean test images the streams are drawn from
        side: Image height and width
        channels: Color channels
    """

    seed: int = 0
    class_count: int = 6
    train_samples: int = 2400
    test_samples: int = 1200
    side: int = 32
    channels: int = 3


@dataclass
class SourceTrainingConfig:
    """Source pre-training settings."""

    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    widths: tuple[int, ...] = (32, 64, 64)


@dataclass
class ScheduleConfig:
    """
    Test stream layout.

    Attributes:
        mode: "continual" or "gradual"
        kinds: Corruption kinds in stream order
        batches_per_domain: Test batches per scheduled domain
    """

    mode: str = "continual"
    kinds: list[str] = field(default_factory=lambda: [k.value for k in CorruptionKind])
    batches_per_domain: int = 20


@dataclass
class SweepConfig:
    """
    Experiment grid.

    Every listed method is run for every combination of the given axes and seeds.
    An axis left as None is not swept and takes its value from the adapt section.

    Attributes:
        methods: Method names or aliases (see METHOD_ALIASES)
        lambda_mix: Mixup strengths
        updates: Updates per test batch
        source_fraction: Retained source fractions
        buffer_size: Sliding-window sizes (null entries run in batch mode)
    """

    methods: list[str] = field(default_factory=lambda: ["source", "bn1", "gtta_mix"])
    lambda_mix: list[float] | None = None
    updates: list[int] | None = None
    source_fraction: list[float] | None = None
    buffer_size: list[int | None] | None = None

    def axes(self) -> dict[str, list[Any]]:
        return {
            name: list(getattr(self, name))
            for name in ("lambda_mix", "updates", "source_fraction", "buffer_size")
            if getattr(self, name) is not None
        }


# Named methods beyond the plain AdaptMethod values. Each maps to overrides.
METHOD_ALIASES: dict[str, dict[str, Any]] = {
    "bn0": {"adapt.method": "bn_variant", "bn.variant": "bn0"},
    "bn0_1": {"adapt.method": "bn_variant", "bn.variant": "bn0_1"},
    "bn1": {"adapt.method": "bn_variant", "bn.variant": "bn1"},
    "bn_ema": {"adapt.method": "bn_variant", "bn.variant": "bn_ema"},
    "self_training": {"adapt.method": "self_training_only", "st.filtering": True},
    "self_training_no_filter": {"adapt.method": "self_training_only", "st.filtering": False},
    "source_replay_only": {"adapt.method": "source_replay", "st.enabled": False},
    "mixup_only": {"adapt.method": "gtta_mix", "st.enabled": False},
    "style_only": {"adapt.method": "gtta_st", "st.enabled": False},
}

# Short override prefixes resolved inside the adapt section
_ADAPT_SECTIONS = {"bn", "mixup", "style", "st"}
_FIELD_ALIASES = {("mixup", "lambda"): "lambda_mix"}


@dataclass
class ExperimentConfig:
    """
    Complete description of an experiment.

    Attributes:
        name: Experiment name
        dataset: Synthetic dataset settings
        source: Source pre-training settings
        schedule: Test stream layout
        adapt: Base adaptation settings shared by all cells
        sweep: Methods and swept axes
        seeds: Run seeds
        output_dir: Directory receiving the results
        workers: Worker processes for independent cells (1 runs in-process)
    """

    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    source: SourceTrainingConfig = field(default_factory=SourceTrainingConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "results"
    workers: int = 1

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        """
        Build a config from a (possibly partial) mapping; unknown keys are ignored.

        Raises:
            ConfigurationError: If a section is not a mapping
        """
        return _build(cls, data)

    @classmethod
    def from_yaml(cls, yaml_content: str) -> ExperimentConfig:
        """
        Create an ExperimentConfig from YAML (or JSON) content.

        Args:
            yaml_content: YAML string with configuration values

        Returns:
            ExperimentConfig with values from YAML merged with defaults
        """
        data = yaml.safe_load(yaml_content) or {}
        if not isinstance(data, dict):
            raise ConfigurationError("configuration must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentConfig:
        """
        Load configuration from a YAML or JSON file.

        Raises:
            FileNotFoundError: If the file does not exist
        """
        file_path = Path(path)
        if not file_path.exists():
            raise FileNotFoundError(f"Configuration file not found: {path}")
        return cls.from_yaml(file_path.read_text())

    def to_yaml(self) -> str:
        """
        Export configuration to YAML string.

        Returns:
            YAML representation of this configuration
        """
        return yaml.safe_dump(self.to_dict(), default_flow_style=False, sort_keys=False)

    def validate(self) -> None:
        """
        Check the whole experiment before anything is computed.

        Raises:
            ConfigurationError: On the first problem found
        """
        data = self.dataset
        if data.class_count < 2 or data.side < 16 or data.channels < 1:
            raise ConfigurationError(
                "dataset needs class_count >= 2, side >= 16 and channels >= 1"
            )
        if data.train_samples < data.class_count or data.test_samples < 1:
            raise ConfigurationError("dataset sample counts are too small")
        if self.source.epochs < 0 or self.source.lr < 0 or self.source.batch_size < 2:
            raise ConfigurationError("source training needs epochs >= 0, lr >= 0, batch_size >= 2")

        try:
            ScheduleMode(self.schedule.mode)
        except ValueError as e:
            raise ConfigurationError(f"Unknown schedule mode '{self.schedule.mode}'") from e
        if not self.schedule.kinds:
            raise ConfigurationError("schedule.kinds must not be empty")
        for kind in self.schedule.kinds:
            try:
                CorruptionKind(kind)
            except ValueError as e:
                raise ConfigurationError(f"Unknown corruption kind '{kind}'") from e
        if len(set(self.schedule.kinds)) != len(self.schedule.kinds):
            raise ConfigurationError("schedule.kinds must not repeat a kind")
        if self.schedule.batches_per_domain < 1:
            raise ConfigurationError("schedule.batches_per_domain must be >= 1")

        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if not self.sweep.methods:
            raise ConfigurationError("sweep.methods must not be empty")
        for name, values in self.sweep.axes().items():
            if not values:
                raise ConfigurationError(f"sweep.{name} must not be empty")
            for value in values:
                if isinstance(value, float) and not math.isfinite(value):
                    raise ConfigurationError(f"sweep.{name} holds a non-finite value")

        for method in self.sweep.methods:
            method_config(self, method).validate()

        self.adapt.bn.validate()
        self.adapt.mixup.validate()
        self.adapt.style.validate()
        self.adapt.st.validate()


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _nested_type(owner: type, name: str) -> type | None:
    """Dataclass type of a nested section, read from the field's default factory."""
    for f in fields(owner):
        if f.name == name and f.default_factory is not MISSING:
            default = f.default_factory()
            if is_dataclass(default):
                return type(default)
    return None


def _build(cls: type, data: dict[str, Any]) -> Any:
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {cls.__name__} must be a mapping, got {data!r}")
    kwargs: dict[str, Any] = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        nested = _nested_type(cls, f.name)
        if nested is not None:
            value = _build(nested, value or {})
        elif isinstance(f.default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def _resolve(path: str) -> list[str]:
    parts = path.split(".")
    if parts[0] in _ADAPT_SECTIONS:
        parts = ["adapt", *parts]
    if len(parts) >= 2:
        alias = _FIELD_ALIASES.get((parts[-2], parts[-1]))
        if alias:
            parts[-1] = alias
    return parts


def apply_overrides(config: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """
    Return a copy of ``config`` with dotted-key overrides applied.

    ``bn.*``, ``mixup.*``, ``style.*`` and ``st.*`` address the adapt section;
    ``mixup.lambda`` is accepted for ``mixup.lambda_mix``. String values are parsed
    as YAML scalars, so ``"false"``, ``"0.25"`` and ``"[1, 2]"`` arrive typed.

    Raises:
        ConfigurationError: If a key does not name a configuration field
    """
    result = copy.deepcopy(config)
    for key, raw in overrides.items():
        value = yaml.safe_load(raw) if isinstance(raw, str) else raw
        parts = _resolve(key)
        target: Any = result
        for part in parts[:-1]:
            if not is_dataclass(target) or not hasattr(target, part):
                raise ConfigurationError(f"Unknown configuration key '{key}'")
            target = getattr(target, part)
        if not is_dataclass(target) or parts[-1] not in {f.name for f in fields(target)}:
            raise ConfigurationError(f"Unknown configuration key '{key}'")
        if is_dataclass(getattr(target, parts[-1])):
            raise ConfigurationError(f"'{key}' is a section, not a value")
        if isinstance(getattr(target, parts[-1]), tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(target, parts[-1], value)
    return result


def parse_override(text: str) -> tuple[str, str]:
    """Split a ``key=value`` command-line override."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"override '{text}' is not of the form key=value")
    return key.strip(), value.strip()


def method_config(config: ExperimentConfig, method: str) -> AdaptConfig:
    """
    Adapt settings of one sweep method: the base adapt section plus its alias overrides.

    Raises:
        ConfigurationError: If the name is neither a method nor an alias
    """
    if method in METHOD_ALIASES:
        return apply_overrides(config, METHOD_ALIASES[method]).adapt
    try:
        AdaptMethod(method)
    except ValueError as e:
        known = sorted([m.value for m in AdaptMethod] + list(METHOD_ALIASES))
        raise ConfigurationError(
            f"Unknown method '{method}' (known: {', '.join(known)})"
        ) from e
    adapt = copy.deepcopy(config.adapt)
    adapt.method = method
    if method == AdaptMethod.SOURCE.value:
        adapt.bn = BNAdaptConfig(variant="bn0")
    return adapt


def _toy_base(name: str) -> ExperimentConfig:
    config = ExperimentConfig(name=name, output_dir=f"results/{name}")
    # every schedule gives each domain the same 20 batches, so level-5 domains compare
    # across schedules; desk-scale streams are short and the adaptation rate is raised
    config.schedule.batches_per_domain = 20
    config.adapt.lr = 1e-4
    config.adapt.batch_size_test = 32
    config.adapt.batch_size_source = 32
    return config


def _continual_toy() -> ExperimentConfig:
    config = _toy_base("continual-toy")
    config.sweep.methods = [
        "source",
        "bn0_1",
        "bn1",
        "bn_ema",
        "self_training",
        "gtta_mix",
        "gtta_st",
    ]
    return config


def _gradual_toy() -> ExperimentConfig:
    config = _toy_base("gradual-toy")
    config.schedule.mode = "gradual"
    config.sweep.methods = ["source", "bn1", "bn_ema", "gtta_mix", "gtta_st"]
    return config


def _single_sample_toy() -> ExperimentConfig:
    config = _toy_base("single-sample-toy")
    config.sweep.methods = ["gtta_mix"]
    config.sweep.buffer_size = [None, 16, 32]
    return config


def _ablation_mixup() -> ExperimentConfig:
    config = _toy_base("ablation-mixup")
    config.sweep.methods = ["gtta_mix"]
    config.sweep.lambda_mix = [0.0, 0.1, 0.25, 1.0 / 3.0, 0.4, 0.5]
    return config


def _ablation_updates() -> ExperimentConfig:
    config = _toy_base("ablation-updates")
    config.sweep.methods = ["self_training", "gtta_mix"]
    config.sweep.updates = [1, 2, 4, 8]
    return config


def _ablation_source_fraction() -> ExperimentConfig:
    config = _toy_base("ablation-source-fraction")
    config.sweep.methods = ["gtta_mix"]
    config.sweep.source_fraction = [1.0, 0.5, 0.25, 0.1, 0.05, 0.01]
    return config


def _ablation_components() -> ExperimentConfig:
    config = _toy_base("ablation-components")
    config.sweep.methods = [
        "self_training_no_filter",
        "self_training",
        "source_replay",
        "gtta_mix",
        "mixup_only",
        "style_only",
    ]
    config.sweep.updates = [1, 4]
    return config


PRESETS = {
    "continual-toy": _continual_toy,
    "gradual-toy": _gradual_toy,
    "single-sample-toy": _single_sample_toy,
    "ablation-mixup": _ablation_mixup,
    "ablation-updates": _ablation_updates,
    "ablation-source-fraction": _ablation_source_fraction,
    "ablation-components": _ablation_components,
}


def load_preset(name: str) -> ExperimentConfig:
    """
    Return a fresh copy of a shipped preset.

    Raises:
        ConfigurationError: For an unknown preset name
    """
    try:
        return PRESETS[name]()
    except KeyError as e:
        raise ConfigurationError(
            f"Unknown preset '{name}' (known: {', '.join(PRESETS)})"
        ) from e


def merge_file(base: ExperimentConfig, path: str | Path) -> ExperimentConfig:
    """
    Overlay the keys present in a config file on ``base``.

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigurationError: If the file is not a mapping or names unknown sections
    """
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"Configuration file not found: {path}")
    data = yaml.safe_load(file_path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigurationError("configuration must be a mapping")
    merged = _deep_merge(base.to_dict(), data)
    return ExperimentConfig.from_dict(merged)


def _deep_merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out
