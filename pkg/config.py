"""
Experiment configuration.

A config file is flat key=value text with dotted sections, e.g.

    model.enh_channels=16
    train.lr=0.01
    scene.t60_choices=0.2,0.3,0.4,0.5,0.6,0.7

It is parsed with python-dotenv; RTSDOA_<SECTION>_<KEY> environment variables
(loaded from .env as well) override file values.
"""
import os
from dataclasses import dataclass, field, fields, replace

from dotenv import dotenv_values, load_dotenv

# Load environment variables
load_dotenv()

ENV_PREFIX = "RTSDOA_"


class ConfigError(ValueError):
    """Raised for unknown keys or values that cannot be parsed"""


@dataclass(frozen=True)
class ModelConfig:
    mics: int = 6
    freq_bins: int = 161
    classes: int = 37
    input_mode: str = "complex"
    use_enhancement: bool = True
    use_speaker_features: bool = True
    enh_channels: int = 16
    crn_layers: int = 5
    crn_hidden: int = 32
    crn_lstm_layers: int = 2
    blocks: int = 5
    spatial_channels: int = 8
    speaker_channels: int = 8
    glu_kernel_time: int = 2
    glu_kernel_freq: int = 3
    glu_freq_strides: tuple = (2, 2, 2, 2, 2)
    speaker_kernel_time: int = 2
    hidden_h: int = 8
    hidden_h2: int = 32
    heads: int = 2
    fconv_kernel: int = 5
    tconv_kernel: int = 5
    tconv_groups: int = 8
    causal_attention: bool = False
    layer_norm: bool = True
    init_seed: int = 0

    def validate(self):
        if self.input_mode not in ("complex", "magnitude"):
            raise ConfigError(f"model.input_mode must be 'complex' or 'magnitude', got '{self.input_mode}'")
        if len(self.glu_freq_strides) != self.blocks:
            raise ConfigError(
                f"model.glu_freq_strides has {len(self.glu_freq_strides)} entries for {self.blocks} blocks"
            )
        if self.spatial_channels % self.heads:
            raise ConfigError(f"model.spatial_channels={self.spatial_channels} not divisible by heads={self.heads}")
        if self.hidden_h2 % self.tconv_groups:
            raise ConfigError(f"model.hidden_h2={self.hidden_h2} not divisible by tconv_groups={self.tconv_groups}")
        if self.classes != 37:
            raise ConfigError("model.classes must be 37 (36 directions plus silence)")
        return self


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    plateau_patience: int = 2
    lr_factor: float = 0.5
    min_lr: float = 1e-4
    batch: int = 16
    epochs: int = 100
    seed: int = 0
    pooled_metrics: bool = False

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"train.batch must be at least 1, got {self.batch}")
        return self


@dataclass(frozen=True)
class DataConfig:
    corpus_dir: str = "corpus"
    noise_dir: str = ""
    train_scenes: int = 20000
    dev_scenes: int = 600
    test_scenes: int = 1000
    min_duration: float = 3.0
    max_duration: float = 16.0
    dev_speaker_fraction: float = 0.1
    test_speaker_fraction: float = 0.2
    workers: int = 1

    def validate(self):
        if self.min_duration > self.max_duration:
            raise ConfigError("data.min_duration exceeds data.max_duration")
        return self


@dataclass(frozen=True)
class SceneConfig:
    room_dims: tuple = (5.0, 6.0, 3.0)
    t60_choices: tuple = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    sir_range: tuple = (-5, 5)
    snr_range: tuple = (-5, 5)
    speed_of_sound: float = 343.0
    array_center: tuple = (2.5, 3.0, 1.5)
    array_radius: float = 0.05
    source_distance: float = 1.5
    crossfade: float = 0.01
    moving: bool = True
    interferer: bool = True
    noise: bool = True
    directions: tuple = field(default=(), metadata={"item": int})
    max_order: int = -1
    anchor_mode: str = "clean"

    def validate(self):
        if self.anchor_mode not in ("clean", "spatial"):
            raise ConfigError(f"scene.anchor_mode must be 'clean' or 'spatial', got '{self.anchor_mode}'")
        if any(not 0 <= d < 36 for d in self.directions):
            raise ConfigError("scene.directions must be catalog indices in 0..35")
        if self.moving and len(self.directions) == 1:
            raise ConfigError("a moving target needs at least two scene.directions")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def validate(self):
        for section in SECTIONS:
            getattr(self, section).validate()
        return self


SECTIONS = ("model", "train", "data", "scene")

LARGE_MODEL = ModelConfig(enh_channels=64, crn_hidden=256, hidden_h2=96)


def _parse_bool(key, text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got '{text}'")


def _coerce(key, spec, default, text):
    try:
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            item = spec.metadata.get("item") or (type(default[0]) if default else float)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(item(p) for p in parts)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse '{text}'") from None


def _apply(section_obj, section, values):
    specs = {f.name: f for f in fields(section_obj)}
    changes = {}
    for key, text in values.items():
        if key not in specs:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        changes[key] = _coerce(f"{section}.{key}", specs[key], getattr(section_obj, key), text)
    return replace(section_obj, **changes) if changes else section_obj


def config_from_mapping(mapping, base=None):
    """Build a config from {'section.key': 'text'} entries on top of base"""
    base = base or ExperimentConfig()
    grouped = {section: {} for section in SECTIONS}
    for dotted, text in mapping.items():
        if text is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in grouped or not key:
            raise ConfigError(f"unknown config key '{dotted}'")
        grouped[section][key] = str(text)
    sections = {section: _apply(getattr(base, section), section, grouped[section]) for section in SECTIONS}
    return ExperimentConfig(**sections).validate()


def environment_overrides(base):
    """RTSDOA_<SECTION>_<KEY> variables that name an existing key"""
    mapping = {}
    for section in SECTIONS:
        for spec in fields(getattr(base, section)):
            value = os.getenv(f"{ENV_PREFIX}{section.upper()}_{spec.name.upper()}")
            if value is not None:
                mapping[f"{section}.{spec.name}"] = value
    return mapping


def load_config(path=None, overrides=None, use_environment=True):
    """File values, then environment variables, then explicit overrides"""
    config = ExperimentConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        config = config_from_mapping(dotenv_values(path), config)
    if use_environment:
        config = config_from_mapping(environment_overrides(config), config)
    if overrides:
        config = config_from_mapping(overrides, config)
    return config.validate()


def config_to_text(config):
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        for spec in fields(obj):
            value = getattr(obj, spec.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = str(value)
            lines.append(f"{section}.{spec.name}={text}")
    return "\n".join(lines) + "\n"


def save_config(config, path):
    with open(path, "w") as handle:
        handle.write(config_to_text(config))
