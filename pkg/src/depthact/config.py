"""Flat-JSON experiment configuration shared by all CLI commands."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError
from .model import ABLATION_MODES, ModelConfig
from .synthvid import DEPTH_MODES, GenConfig
from .training import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    height: int = 64
    width: int = 64
    raw_frames: int = 16
    frames: int = 8
    stride: int = 2
    num_classes: int = 6
    n_per_class: int = 100
    split_ratio: float = 0.8
    noise_rgb: float = 0.02
    depth_mode: str = "ground_truth"
    depth_levels: int = 8
    depth_noise: float = 0.05
    data_seed: int = 1234
    # model (scaled for single-core CPU budgets; all knobs overridable)
    patch_size: int = 16
    backbone_dim: int = 32
    backbone_layers: int = 4
    backbone_heads: int = 4
    side_dim: int = 16
    side_heads: int = 2
    ssm_state: int = 8
    ssm_expand: int = 2
    ssm_blocks: int = 2
    ssm_conv: int = 4
    fusion_layers: int = 1
    fusion_heads: int = 2
    mode: str = "rgb_depth_mamba"
    # training
    lr: float = 1e-2
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    eval_batch_size: int = 26
    seed: int = 0
    fuse_space: str = "logit"
    aux_loss_weight: float = 0.5
    lr_schedule: str = "cosine"
    # I/O
    manifest: str | None = None
    out_dir: str = "out"

    def __post_init__(self):
        if self.mode not in ABLATION_MODES:
            raise ConfigError(f"mode must be one of {ABLATION_MODES}, got {self.mode!r}")
        if self.depth_mode not in DEPTH_MODES:
            raise ConfigError(f"depth_mode must be one of {DEPTH_MODES}, got {self.depth_mode!r}")
        if (self.frames - 1) * self.stride >= self.raw_frames:
            raise ConfigError(
                f"frames={self.frames} at stride={self.stride} does not fit raw_frames={self.raw_frames}")

    def gen_config(self) -> GenConfig:
        return GenConfig(height=self.height, width=self.width, raw_frames=self.raw_frames,
                         num_classes=self.num_classes, noise_rgb=self.noise_rgb,
                         depth_mode=self.depth_mode, depth_levels=self.depth_levels,
                         depth_noise=self.depth_noise)

    def model_config(self, mode: str | None = None) -> ModelConfig:
        return ModelConfig(frames=self.frames, height=self.height, width=self.width,
                           num_classes=self.num_classes, patch_size=self.patch_size,
                           backbone_dim=self.backbone_dim, backbone_layers=self.backbone_layers,
                           backbone_heads=self.backbone_heads, side_dim=self.side_dim,
                           side_heads=self.side_heads, ssm_state=self.ssm_state,
                           ssm_expand=self.ssm_expand, ssm_blocks=self.ssm_blocks,
                           ssm_conv=self.ssm_conv, fusion_layers=self.fusion_layers,
                           fusion_heads=self.fusion_heads, mode=mode or self.mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps, epochs=self.epochs,
                           batch_size=self.batch_size, eval_batch_size=self.eval_batch_size,
                           seed=self.seed, fuse_space=self.fuse_space,
                           aux_loss_weight=self.aux_loss_weight, lr_schedule=self.lr_schedule)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """Strict loader: unknown keys and wrong value types are errors."""
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a flat JSON object")
    if overrides:
        raw.update(overrides)
    kwargs = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, value)
    return ExperimentConfig(**kwargs)


def _coerce(key: str, value):
    default = getattr(ExperimentConfig, key)
    if key == "manifest":
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string path or null")
        return value
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"config key {key!r} has unexpected boolean value")
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string, got {value!r}")
        return value
    raise ConfigError(f"config key {key!r} is not settable")
