"""
Run configuration
Flat key=value files parsed with python-dotenv and typed by dataclasses
"""

import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Optional, Tuple

from dotenv import dotenv_values, load_dotenv

# Load environment variables
load_dotenv()

ENV_PREFIX = 'DOAM_'

STRATEGIES = ('hard', 'easy', 'random', 'focal', 'none')
GROUP_BY = ('category', 'occlusion_level')


class ConfigError(ValueError):
    """Raised for unknown keys, unparseable values and invalid settings"""


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text):
    if text.lower() in ('', 'none', 'auto'):
        return None
    return float(text)


def _tuple_of(cast):
    def parse(text):
        return tuple(cast(part.strip()) for part in text.split(',') if part.strip())
    return parse


_PARSERS = {bool: _parse_bool, int: int, float: float, str: str}


def _field_default(spec_field):
    if spec_field.default is not MISSING:
        return spec_field.default
    return spec_field.default_factory()


def _coerce(spec_field, value):
    if not isinstance(value, str):
        return value
    parser = spec_field.metadata.get('parse') or _PARSERS[type(_field_default(spec_field))]
    try:
        return parser(value.strip())
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for '{spec_field.name}': {value!r}") from e


def _build(cls, values):
    kwargs = {}
    for spec_field in fields(cls):
        if spec_field.metadata.get('nested'):
            kwargs[spec_field.name] = _build(spec_field.default_factory, values)
        elif spec_field.name in values:
            kwargs[spec_field.name] = _coerce(spec_field, values[spec_field.name])
    return cls(**kwargs)


def known_keys(cls):
    """All flat keys a config dataclass (and its nested sections) accepts"""
    keys = set()
    for spec_field in fields(cls):
        if spec_field.metadata.get('nested'):
            keys |= known_keys(spec_field.default_factory)
        else:
            keys.add(spec_field.name)
    return keys


def to_flat_dict(config):
    """Flatten a config dataclass back into key=value strings"""
    flat = {}
    for spec_field in fields(config):
        value = getattr(config, spec_field.name)
        if spec_field.metadata.get('nested'):
            flat.update(to_flat_dict(value))
        elif isinstance(value, tuple):
            flat[spec_field.name] = ','.join(str(v) for v in value)
        elif value is None:
            flat[spec_field.name] = 'none'
        elif isinstance(value, bool):
            flat[spec_field.name] = 'true' if value else 'false'
        else:
            flat[spec_field.name] = str(value)
    return flat


@dataclass(frozen=True)
class DOAMConfig:
    """Attention module settings (channel widths, block counts, region scales)"""
    edge_channels: int = 16
    region_channels: int = 16
    edge_blocks: int = 2
    region_blocks: int = 2
    scales: Tuple[int, ...] = field(default=(5, 10, 15), metadata={'parse': _tuple_of(int)})
    use_norm: bool = True
    use_edge_guidance: bool = True
    use_material_awareness: bool = True
    use_gate: bool = True
    use_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'scales', tuple(int(k) for k in self.scales))
        if self.edge_blocks < 1 or self.region_blocks < 1:
            raise ConfigError("edge_blocks and region_blocks must be at least 1")
        if self.edge_channels < 1 or self.region_channels < 1:
            raise ConfigError("edge_channels and region_channels must be at least 1")
        if not self.scales:
            raise ConfigError("scales must not be empty")
        if self.scales[0] < 1 or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be positive and strictly increasing, got {self.scales}")
        if self.use_attention and not (self.use_edge_guidance or self.use_material_awareness):
            raise ConfigError("at least one of edge guidance or material awareness must be enabled")


@dataclass(frozen=True)
class DetectorConfig:
    """Single-stage detector settings"""
    image_channels: int = 3
    num_classes: int = 5
    image_size: int = 64
    widths: Tuple[int, ...] = field(default=(16, 32, 64, 64, 128), metadata={'parse': _tuple_of(int)})
    anchor_scales: Tuple[float, ...] = field(default=(0.25, 0.5), metadata={'parse': _tuple_of(float)})
    aspect_ratios: Tuple[float, ...] = field(default=(0.5, 2.0), metadata={'parse': _tuple_of(float)})
    use_doam: bool = False
    doam: DOAMConfig = field(default_factory=DOAMConfig, metadata={'nested': True})

    def __post_init__(self):
        for name in ('widths', 'anchor_scales', 'aspect_ratios'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.image_channels < 1:
            raise ConfigError("image_channels must be at least 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if len(self.widths) != 5 or min(self.widths) < 1:
            raise ConfigError("widths must list 5 positive channel counts")
        if len(self.anchor_scales) != 2 or min(self.anchor_scales) <= 0:
            raise ConfigError("anchor_scales must list 2 positive scales (stride 8 and 16 heads)")
        if not self.aspect_ratios or min(self.aspect_ratios) <= 0:
            raise ConfigError("aspect_ratios must be positive")
        if self.image_size < 32 or self.image_size % 16:
            raise ConfigError(f"image_size must be a multiple of 16 and at least 32, got {self.image_size}")
        if self.use_doam and max(self.doam.scales) > self.image_size:
            raise ConfigError(f"region scale {max(self.doam.scales)} exceeds image_size {self.image_size}")

    @property
    def backbone_channels(self):
        return self.image_channels + 1 if self.use_doam else self.image_channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        doam = DOAMConfig(**values.pop('doam', {}))
        return cls(doam=doam, **values)


@dataclass(frozen=True)
class TrainConfig:
    """Training loop and sample-pool strategy settings"""
    strategy: str = 'hard'
    threshold: Optional[float] = field(default=None, metadata={'parse': _parse_optional_float})
    pool_size: int = 5
    batch_size: int = 24
    focal_gamma: float = 2.0
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}, got '{self.strategy}'")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be at least 1")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass(frozen=True)
class SyntheticConfig:
    """Synthetic occluded-object dataset settings"""
    image_size: int = 64
    num_classes: int = 5
    train_images: int = 500
    test_images: int = 100
    occlusion_density: float = 1.0
    clutter: float = 3.0
    targets_per_image: int = 1
    min_object_size: int = 12
    max_object_size: int = 28
    ol_thresholds: Tuple[float, ...] = field(default=(0.1, 0.5), metadata={'parse': _tuple_of(float)})
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'ol_thresholds', tuple(self.ol_thresholds))
        if len(self.ol_thresholds) != 2 or not 0 < self.ol_thresholds[0] < self.ol_thresholds[1] <= 1:
            raise ConfigError(f"ol_thresholds must be two increasing fractions in (0, 1], got {self.ol_thresholds}")
        if self.occlusion_density < 0 or self.clutter < 0:
            raise ConfigError("occlusion_density and clutter must be non-negative")
        if self.train_images < 0 or self.test_images < 0:
            raise ConfigError("image counts must be non-negative")
        if self.targets_per_image < 1:
            raise ConfigError("targets_per_image must be at least 1")


@dataclass(frozen=True)
class EvalConfig:
    """Inference thresholds and evaluation grouping"""
    conf_thresh: float = 0.05
    nms_iou: float = 0.45
    top_k: int = 100
    iou_thresh: float = 0.5
    group_by: str = 'occlusion_level'

    def __post_init__(self):
        for name in ('conf_thresh', 'nms_iou', 'iou_thresh'):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.group_by not in GROUP_BY:
            raise ConfigError(f"group_by must be one of {', '.join(GROUP_BY)}")


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs: paths, seed and the typed sections"""
    seed: int = 0
    data_root: str = 'data/synthetic'
    out_dir: str = 'runs/latest'
    checkpoint: str = ''
    eval_every_epoch: bool = False
    benchmark_seeds: Tuple[int, ...] = field(default=(0, 1, 2, 3, 4), metadata={'parse': _tuple_of(int)})
    detector: DetectorConfig = field(default_factory=DetectorConfig, metadata={'nested': True})
    train: TrainConfig = field(default_factory=TrainConfig, metadata={'nested': True})
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig, metadata={'nested': True})
    eval: EvalConfig = field(default_factory=EvalConfig, metadata={'nested': True})

    @classmethod
    def from_mapping(cls, values):
        unknown = sorted(set(values) - known_keys(cls))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return _build(cls, values)


def _environment_values():
    keys = known_keys(RunConfig)
    values = {}
    for name, value in os.environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in keys:
                values[key] = value
    return values


def collect_config_values(path=None, overrides=None):
    """
    Merge config sources into one flat mapping

    Args:
        path (str): Optional key=value config file
        overrides (dict): Values from explicit flags; None entries are ignored

    Returns:
        dict: Flat key -> raw value, later sources winning
    """
    values = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is not None:
                values[key.strip().lower()] = value
    values.update(_environment_values())
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return values


def load_run_config(path=None, overrides=None):
    """Load a RunConfig from defaults, file, DOAM_* environment and overrides"""
    return RunConfig.from_mapping(collect_config_values(path, overrides))


def write_config(path, config):
    """Write the resolved config as a flat key=value file"""
    with open(path, 'w') as f:
        for key, value in sorted(to_flat_dict(config).items()):
            f.write(f"{key}={value}\n")


__all__ = [
    'ConfigError', 'DOAMConfig', 'DetectorConfig', 'TrainConfig', 'SyntheticConfig',
    'EvalConfig', 'RunConfig', 'STRATEGIES', 'GROUP_BY', 'collect_config_values',
    'load_run_config', 'write_config', 'to_flat_dict', 'known_keys',
]
