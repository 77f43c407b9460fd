"""Run configuration: named presets plus flat ``section.key = value`` overrides.

A resolved config is a set of dataclasses, one per section. Files and
command-line flags use the same flat keys; unknown keys are rejected.
"""
import dataclasses
from dataclasses import dataclass, field

from . import kvfile
from .hard_attention import AGENT_PRESETS, AgentConfig
from .objectives import LossConfig
from .pyramid import GeneratorConfig
from .sampler import SamplerConfig
from .soft_attention import PRESETS as SOFT_PRESETS
from .soft_attention import SoftAttentionConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``step_size``/``gamma`` describe the step-decay schedule. ``val_fold`` of
    -1 means the fold after ``test_fold``.
    """

    mode: str = "joint"
    tiles_per_batch: int = 40
    slides_per_batch: int = 4
    lr_soft: float = 1e-4
    lr_hard: float = 1e-3
    step_size: int = 30
    gamma: float = 0.1
    epochs: int = 30
    soft_epochs: int = 30
    seed: int = 0
    folds: int = 4
    test_fold: int = 0
    val_fold: int = -1
    patience: int = 10
    min_delta: float = 0.005
    augment: bool = True
    aggregation: str = "dominant"
    tile_source: str = "attention"
    bit_exact: bool = True
    threads: int = 1
    batches_per_epoch: int = 0  # 0 = one pass over the training slides

    def __post_init__(self):
        if self.mode not in ("separate", "joint"):
            raise ConfigError(f"train.mode must be 'separate' or 'joint', got {self.mode!r}")
        if self.tile_source not in ("attention", "random"):
            raise ConfigError(f"train.tile_source must be 'attention' or 'random', got {self.tile_source!r}")
        if self.slides_per_batch < 1 or self.tiles_per_batch % self.slides_per_batch:
            raise ConfigError("tiles_per_batch must be divisible by slides_per_batch")
        if self.folds < 3:
            raise ConfigError("need at least 3 folds (train, validation, test)")
        if not 0 <= self.test_fold < self.folds:
            raise ConfigError("test_fold out of range")

    @property
    def tiles_per_slide(self):
        return self.tiles_per_batch // self.slides_per_batch

    @property
    def validation_fold(self):
        return (self.test_fold + 1) % self.folds if self.val_fold < 0 else self.val_fold


@dataclass
class DataConfig:
    n_slides: int = 60
    seed: int = 0


@dataclass
class EvalConfig:
    seed: int = 1234
    positive_class: int = 1


SECTIONS = {
    "data": DataConfig,
    "generator": GeneratorConfig,
    "soft": SoftAttentionConfig,
    "sampler": SamplerConfig,
    "agent": AgentConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    soft: SoftAttentionConfig = field(default_factory=SoftAttentionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    preset: str = "her2"

    def flat(self):
        out = {"config_version": CONFIG_VERSION, "preset": self.preset}
        for name in SECTIONS:
            for f in dataclasses.fields(getattr(self, name)):
                out[f"{name}.{f.name}"] = getattr(getattr(self, name), f.name)
        return out

    def dumps(self):
        return kvfile.dumps(self.flat(), header="resolved run configuration")

    def save(self, path):
        kvfile.write(path, self.flat(), header="resolved run configuration")


def _coerce(value, default, key):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if default is None or isinstance(default, str):
        return value
    raise ConfigError(f"{key}: cannot use {value!r} for a {type(default).__name__} setting")


def _preset_sections(name):
    if name == "her2":
        return {"soft": SOFT_PRESETS["her2"], "agent": AGENT_PRESETS["her2"]}
    if name == "mmr":
        return {
            "generator": GeneratorConfig(n_classes=2, class_intensity=(0.0, 0.8)),
            "soft": SOFT_PRESETS["mmr"],
            "agent": AGENT_PRESETS["mmr"],
            "sampler": SamplerConfig(n_tiles=15, mask_mode="tumor", pool=3),
            "train": TrainConfig(mode="separate", tiles_per_batch=30, slides_per_batch=2, folds=5),
            "data": DataConfig(n_slides=40),
        }
    if name == "synthetic":
        # reduced networks sized for a single CPU; see the decisions ledger
        return {
            "soft": SOFT_PRESETS["synthetic"],
            "agent": AGENT_PRESETS["synthetic"],
            "train": TrainConfig(lr_soft=1e-3, epochs=12, soft_epochs=12, batches_per_epoch=24),
            "loss": LossConfig(beta=0.003),
        }
    raise ConfigError(f"unknown preset {name!r}; choose her2, mmr or synthetic")


PRESET_NAMES = ("her2", "mmr", "synthetic")


def build(preset="her2", overrides=None):
    """Resolve ``preset`` plus flat ``overrides`` into a validated ``RunConfig``."""
    base = RunConfig(preset=preset, **_preset_sections(preset))
    overrides = dict(overrides or {})
    version = overrides.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} is not supported (this build reads version {CONFIG_VERSION})")
    overrides.pop("preset", None)
    staged = {name: {} for name in SECTIONS}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(base, section)
        known = {f.name for f in dataclasses.fields(current)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        staged[section][name] = _coerce(value, getattr(current, name), key)
    sections = {}
    for section, values in staged.items():
        try:
            sections[section] = dataclasses.replace(getattr(base, section), **values)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    cfg = RunConfig(preset=preset, **sections)
    if cfg.agent.n_classes != cfg.generator.n_classes:
        raise ConfigError("agent.n_classes must equal generator.n_classes")
    if cfg.sampler.pool != cfg.soft.pool_size:
        raise ConfigError("sampler.pool must equal soft.pool_size")
    if cfg.sampler.scale != cfg.generator.downsample_factor:
        raise ConfigError("sampler.scale must equal generator.downsample_factor")
    if cfg.loss.T != cfg.agent.T:
        raise ConfigError("loss.T must equal agent.T")
    if cfg.train.tiles_per_slide != cfg.sampler.n_tiles:
        raise ConfigError("train.tiles_per_batch / train.slides_per_batch must equal sampler.n_tiles")
    return cfg


def load(path=None, preset=None, overrides=None):
    """Config from an optional file plus flag overrides (flags win)."""
    values = kvfile.read(path) if path else {}
    chosen = preset or values.get("preset", "her2")
    values.update(overrides or {})
    return build(chosen, values)


def parse_assignments(items):
    """``["train.epochs=3", ...]`` -> ``{"train.epochs": 3}``."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = kvfile.parse_value(v)
    return out
