"""Experiment configuration: sectioned ``key = value`` text.

Sections map onto the library's config dataclasses::

    [train]     TrainConfig        seeds, budget, optimiser schedule
    [synth]     SceneSpec          synthetic scene distribution
    [augment]   AugmentConfig
    [pipeline]  PipelineConfig     normalisation toggles, mask budget
    [loss]      LossWeights
    [net]       NetConfig          layer widths
    [codec]     BoxCodecConfig     ns / nh / template.<i>

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .box3d import BoxCodecConfig, dump_codec_config, load_codec_config
from .errors import ConfigError
from .fpnet_models import NetConfig, PipelineConfig
from .losses import LossWeights
from .synth_data import AugmentConfig, SceneSpec

MASK_SOURCES = ("predicted", "oracle")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    train_count: int = 2000
    val_count: int = 200
    base_lr: float = 1e-3
    decay_every: int = 2000
    decay_factor: float = 0.5
    mask_source: str = "predicted"  # box-stage input during training
    train_seg: bool = True
    iou_threshold: float = 0.5
    log_every: int = 0  # 0 = silent

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.train_count < 1 or self.val_count < 0:
            raise ConfigError("steps >= 0, batch_size >= 1, train_count >= 1 and val_count >= 0 required")
        if self.base_lr <= 0 or self.decay_every < 1 or not (0 < self.decay_factor <= 1):
            raise ConfigError("invalid learning-rate schedule")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}")
        if not self.train_seg and self.mask_source != "oracle":
            raise ConfigError("train_seg = false needs mask_source = oracle")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SceneSpec = field(default_factory=SceneSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    codec: BoxCodecConfig = field(default_factory=BoxCodecConfig)

    def replace(self, **sections):
        """``cfg.replace(train={"steps": 10}, loss={"gamma": 0})``."""
        out = {}
        for name, updates in sections.items():
            cur = getattr(self, name)
            out[name] = dataclasses.replace(cur, **updates) if isinstance(updates, dict) else updates
        return dataclasses.replace(self, **out)


def desk_config(**sections):
    """Settings sized for a single CPU core: 512 frustum / 256 mask points and
    slimmer heads.  Library defaults keep the full 1024 / 512 budgets."""
    cfg = ExperimentConfig(
        augment=AugmentConfig(n_frustum_points=512, n_mask_points=256),
        pipeline=PipelineConfig(n_mask_points=256),
        net=NetConfig(seg_head=(128, 128), box_embed=(128, 128, 256), box_head=(256, 128)),
    )
    return cfg.replace(**sections) if sections else cfg


def ablation_config(**sections):
    """Desk settings for the normalisation / loss ablations.

    Car-only scenes.  Only the box stage (T-Net + box net) is trained, on
    ground-truth masks, and box accuracy is scored at IoU 0.7.  Every row then
    differs from its neighbours only in the toggle under study.
    """
    cfg = desk_config(
        train={"train_seg": False, "mask_source": "oracle", "iou_threshold": 0.7},
        synth={"category_mix": {"Car": 1.0}},
    )
    return cfg.replace(**sections) if sections else cfg


_SECTION_TYPES = {
    "train": TrainConfig,
    "synth": SceneSpec,
    "augment": AugmentConfig,
    "pipeline": PipelineConfig,
    "loss": LossWeights,
    "net": NetConfig,
}


def _coerce(raw, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.split())
        if isinstance(default, dict):
            return {k: float(v) for k, v in (item.split(":") for item in raw.split())}
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, dict):
        return " ".join(f"{k}:{v!r}" for k, v in value.items())
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section(cls, base, sec, name):
    kw = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in sec.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        kw[key] = _coerce(raw, getattr(base, key), f"[{name}] {key}")
    try:
        obj = dataclasses.replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def load_experiment_config(text, base=None):
    """Parse ``text`` on top of ``base`` (default: :func:`desk_config`)."""
    base = base or desk_config()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"experiment config: {exc}") from None
    out = {}
    for name in cp.sections():
        if name == "codec":
            body = "\n".join(f"{k} = {v}" for k, v in cp[name].items())
            out[name] = load_codec_config(body)
        elif name in _SECTION_TYPES:
            out[name] = _section(_SECTION_TYPES[name], getattr(base, name), cp[name], name)
        else:
            raise ConfigError(f"unknown section [{name}]")
    cfg = dataclasses.replace(base, **out)
    check_consistency(cfg)
    return cfg


def check_consistency(cfg):
    if cfg.augment.n_mask_points != cfg.pipeline.n_mask_points:
        raise ConfigError("augment.n_mask_points and pipeline.n_mask_points disagree")
    return cfg


def dump_experiment_config(cfg):
    """Fully resolved config; ``load_experiment_config(dump(cfg)) == cfg``."""
    lines = []
    for name, cls in _SECTION_TYPES.items():
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(cls):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    lines.append("[codec]")
    lines.extend(dump_codec_config(cfg.codec).splitlines())
    return "\n".join(lines) + "\n"


def read_experiment_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return load_experiment_config(text, base)
