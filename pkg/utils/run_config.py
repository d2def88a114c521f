"""
Run configuration: a tree of dataclasses loaded from YAML.

Resolution order is preset defaults, then the YAML file, then command-line
overrides. Unknown keys are rejected with their dotted path.
"""

import copy
import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import yaml

from constants.config import EFFECTIVE_CONFIG_NAME, PRESETS
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("prototype_bce", "info_nce")
PROTO_KINDS = ("gmm", "kmeans")


@dataclass
class DataConfig:
    """Synthetic dataset generation (categories C, frequency bins F, frames T, split sizes)."""

    n_classes: int = 4
    n_freq: int = 16
    n_frames: int = 200
    n_strong: int = 20
    n_weak: int = 20
    n_unlabeled: int = 200
    n_validation: int = 100
    mean_events_per_clip: float = 3.0
    noise_std: float = 0.1
    signature_scale: float = 1.0
    jitter_std: float = 0.1
    min_duration: int = 10
    max_duration: int = 50
    # Category that gets a second signature mode; -1 disables it.
    dual_mode_category: int = 0
    # Defaults to the run's master seed.
    seed: Optional[int] = None
    n_jobs: int = 1


@dataclass
class EncoderConfig:
    n_freq: int = 16
    conv_channels: List[int] = field(default_factory=lambda: [32, 32])
    conv_kernel: int = 3
    d_model: int = 32
    n_transformer_blocks: int = 2
    n_heads: int = 2
    n_bands: int = 4
    time_downsample: int = 4
    embed_dim: int = 32
    ff_mult: int = 2
    leaky_slope: float = 0.01
    max_time_patches: int = 128

    @property
    def n_conv_layers(self) -> int:
        return len(self.conv_channels)


@dataclass
class ContextConfig:
    n_blocks: int = 3
    n_heads: int = 2
    max_distance: int = 32
    ff_mult: int = 2


@dataclass
class ProtoConfig:
    kind: str = "gmm"
    n_prototypes: int = 8
    max_iters: int = 100
    tol: float = 1e-6
    variance_floor: float = 1e-6
    max_fit_frames: int = 50000
    warm_start: bool = False


@dataclass
class MaskConfig:
    enabled: bool = True
    ratio: float = 0.75
    block: int = 10


@dataclass
class MamLossConfig:
    tau: float = 0.1
    leaky_slope: float = 0.01
    loss_kind: str = "prototype_bce"


@dataclass
class PretrainConfig:
    iterations: int = 2
    epochs: int = 15
    batch_size: int = 8
    lr: float = 1e-3
    lr_transformer: float = 5e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_cnn: bool = False


@dataclass
class FinetuneConfig:
    epochs: int = 20
    freeze_epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    lr_transformer: float = 5e-4
    weight_decay: float = 1e-2
    ema_decay: float = 0.999
    consistency_max: float = 2.0
    rampup_epochs: int = 10
    consistency_on_labeled: bool = True
    use_teacher: bool = True
    eval_teacher: bool = False
    head_init_scale: float = 0.01


@dataclass
class EvalConfig:
    threshold: float = 0.5
    median_filter: bool = True
    median_window: int = 7
    rho: float = 0.5
    correlation_threshold: float = 0.3
    n_timelines: int = 4


@dataclass
class ExperimentConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    iterations: List[int] = field(default_factory=lambda: [0, 1, 2])
    protos: List[str] = field(default_factory=lambda: ["gmm", "kmeans"])
    losses: List[str] = field(default_factory=lambda: ["prototype_bce", "info_nce"])
    masks: List[bool] = field(default_factory=lambda: [True, False])
    n_jobs: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = ""
    preset: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: MamLossConfig = field(default_factory=MamLossConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    @property
    def training_frame_count(self) -> int:
        d = self.data
        return d.n_frames * (d.n_strong + d.n_weak + d.n_unlabeled)


def _type_name(hint) -> str:
    origin = typing.get_origin(hint)
    if origin is list:
        return f"list of {_type_name(typing.get_args(hint)[0])}"
    if origin is typing.Union:
        inner = [a for a in typing.get_args(hint) if a is not type(None)]
        return f"{_type_name(inner[0])} or null"
    return {bool: "boolean", int: "integer", float: "number", str: "string"}.get(hint, str(hint))


def _coerce(value: Any, hint, dotted: str) -> Any:
    """Check a scalar or list value against its field annotation; ints are accepted for floats."""
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in typing.get_args(hint) if a is not type(None)]
        return _coerce(value, inner[0], dotted)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{dotted} must be of type {_type_name(hint)}, got {type(value).__name__} {value!r}")
        (item,) = typing.get_args(hint)
        return [_coerce(v, item, f"{dotted}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{dotted} must be of type {_type_name(hint)}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, values: Dict[str, Any], path: str):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys and mistyped values."""
    if not isinstance(values, dict):
        raise ConfigError(f"'{path or 'config'}' must be a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        dotted = ", ".join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"Unknown configuration key(s): {dotted}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in values.items():
        dotted = f"{path}.{name}" if path else name
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, dotted)
        else:
            kwargs[name] = _coerce(value, hints[name], dotted)
    return cls(**kwargs)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(config)


def config_from_dict(values: Dict[str, Any]) -> RunConfig:
    config = _build(RunConfig, values, "")
    validate_config(config)
    return config


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Resolve the effective configuration.

    Args:
        path (str): Optional YAML file
        preset (str): "desk" or "paper"; overrides the file's preset key
        overrides (dict): Nested dict of command-line overrides (applied last)

    Returns:
        RunConfig: Validated configuration
    """
    file_values: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                file_values = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
        if not isinstance(file_values, dict):
            raise ConfigError(f"Config file {path} must contain a mapping")
    chosen = preset or file_values.get("preset", "desk")
    if chosen not in PRESETS:
        raise ConfigError(f"Unknown preset '{chosen}', expected one of {sorted(PRESETS)}")
    values = _merge(PRESETS[chosen], file_values)
    values = _merge(values, overrides or {})
    values["preset"] = chosen
    return config_from_dict(values)


def validate_config(config: RunConfig) -> None:
    """Raise ConfigError on the first invalid setting."""
    d, e, c, p, m = config.data, config.encoder, config.context, config.proto, config.mask
    checks = [
        (d.n_classes >= 1, "data.n_classes must be >= 1"),
        (d.n_frames >= 1 and d.n_freq >= 1, "data.n_frames and data.n_freq must be >= 1"),
        (min(d.n_strong, d.n_weak, d.n_unlabeled, d.n_validation) >= 0, "split counts must be >= 0"),
        (d.mean_events_per_clip >= 0, "data.mean_events_per_clip must be >= 0"),
        (d.noise_std >= 0 and d.jitter_std >= 0, "data noise/jitter must be >= 0"),
        (1 <= d.min_duration <= d.max_duration <= d.n_frames, "data durations must satisfy 1 <= min <= max <= n_frames"),
        (-1 <= d.dual_mode_category < d.n_classes, "data.dual_mode_category must be -1 or a category index"),
        (e.n_freq == d.n_freq, "encoder.n_freq must equal data.n_freq"),
        (len(e.conv_channels) >= 1 and e.conv_kernel % 2 == 1, "encoder needs >= 1 conv layer and an odd kernel"),
        (e.n_bands >= 1 and e.n_freq % e.n_bands == 0, "encoder.n_bands must divide n_freq"),
        (e.d_model % e.n_heads == 0, "encoder.d_model must be divisible by encoder.n_heads"),
        (e.time_downsample >= 1, "encoder.time_downsample must be >= 1"),
        (e.embed_dim > 0, "encoder.embed_dim must be > 0"),
        (e.embed_dim % c.n_heads == 0, "encoder.embed_dim must be divisible by context.n_heads"),
        (c.max_distance >= 0, "context.max_distance must be >= 0"),
        (p.kind in PROTO_KINDS, f"proto.kind must be one of {PROTO_KINDS}"),
        (p.n_prototypes >= 1, "proto.n_prototypes must be >= 1"),
        (p.n_prototypes <= min(config.training_frame_count, p.max_fit_frames),
         "proto.n_prototypes exceeds the number of training frames"),
        (p.variance_floor > 0, "proto.variance_floor must be > 0"),
        (0 < m.ratio <= 1, "mask.ratio must be in (0, 1]"),
        (1 <= m.block <= d.n_frames, "mask.block must be in [1, n_frames]"),
        (config.loss.tau > 0, "loss.tau must be > 0"),
        (config.loss.leaky_slope >= 0, "loss.leaky_slope must be >= 0"),
        (config.loss.loss_kind in LOSS_KINDS, f"loss.loss_kind must be one of {LOSS_KINDS}"),
        (config.pretrain.iterations >= 0 and config.pretrain.epochs >= 0, "pretrain iterations/epochs must be >= 0"),
        (config.pretrain.batch_size >= 1 and config.finetune.batch_size >= 1, "batch sizes must be >= 1"),
        (min(config.pretrain.lr, config.pretrain.lr_transformer,
             config.finetune.lr, config.finetune.lr_transformer) > 0, "learning rates must be > 0"),
        (0 <= config.finetune.freeze_epochs <= config.finetune.epochs, "finetune.freeze_epochs must be in [0, epochs]"),
        (0 <= config.finetune.ema_decay <= 1, "finetune.ema_decay must be in [0, 1]"),
        (config.finetune.consistency_max >= 0, "finetune.consistency_max must be >= 0"),
        (config.eval.median_window >= 1 and config.eval.median_window % 2 == 1,
         "eval.median_window must be an odd integer >= 1"),
        (0 < config.eval.threshold < 1, "eval.threshold must be in (0, 1)"),
        (0 < config.eval.rho <= 1, "eval.rho must be in (0, 1]"),
        (all(k in PROTO_KINDS for k in config.experiment.protos), "experiment.protos has an unknown kind"),
        (all(k in LOSS_KINDS for k in config.experiment.losses), "experiment.losses has an unknown kind"),
        (all(0 <= i for i in config.experiment.iterations), "experiment.iterations must be >= 0"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def save_effective_config(config: RunConfig, out_dir: str) -> str:
    """Echo the effective configuration into the output directory."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, EFFECTIVE_CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=False)
    logger.info(f"Effective configuration written to {path}")
    return path
