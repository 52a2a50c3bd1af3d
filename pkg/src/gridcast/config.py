"""Run configuration: one flat key=value namespace for every knob.

Precedence, lowest to highest: built-in defaults, config file, process
environment (GRIDCAST_<KEY>), command-line --set pairs.  Unknown keys
are rejected at every layer so a typo cannot silently fall back to a
default.  The canonical serialization sorts keys, which makes the
sha-256 config hash stable across dict orderings and layers.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace

from .model import ModelConfig
from .trainer import TrainConfig

ENV_PREFIX = "GRIDCAST_"


@dataclass(frozen=True)
class RunConfig:
    # data preparation
    data_grid_width: int = 100
    data_clusters: int = 200
    data_step_ms: int = 600_000
    data_seed: int = 0

    # model shape
    model_context_len: int = 48
    model_horizon: int = 12
    model_width: int = 64
    model_gru_hidden: int = 64
    model_embed_width: int = 8
    model_guide_hidden: int = 32
    model_n_layers: int = 6
    model_n_heads: int = 4
    model_adapted_blocks: int = 3
    model_lora_rank: int = 4
    model_lora_scale: float = 1.0
    model_adapt_value_output: bool = False
    model_intervals_per_day: int = 144
    model_week_period: int = 7
    model_steps_per_interval: int = 1
    model_scale_hidden: int = 16
    model_scale_center: float = 1.0
    model_scale_spread: float = 0.1
    model_scale_floor: float = 1e-6
    model_gate_hidden: int = 16
    model_kernel: int = 3
    model_bias_intensity: float = 0.1
    model_use_positional: bool = True
    model_dropout: float = 0.0
    model_seed: int = 0

    # optimization
    train_alpha: float = 0.5
    train_lr: float = 3e-4
    train_warmup_steps: int = 100
    train_total_steps: int = 1000
    train_weight_decay: float = 0.01
    train_beta1: float = 0.9
    train_beta2: float = 0.999
    train_adam_eps: float = 1e-8
    train_batch_size: int = 16
    train_patience: int = 5
    train_mask_low: float = 0.7
    train_mask_high: float = 0.8
    train_block_masks: bool = False
    train_stride: int = 1
    train_seed: int = 0

    # measurement
    eval_batch_size: int = 32
    eval_seed: int = 0
    eval_mask_low: float = 0.7
    eval_mask_high: float = 0.8
    zeroshot_reuse_adjacency: bool = False

    def model_config(self, n_nodes: int, n_channels: int) -> ModelConfig:
        return ModelConfig(
            n_nodes=n_nodes, n_channels=n_channels,
            context_len=self.model_context_len, horizon=self.model_horizon,
            width=self.model_width, gru_hidden=self.model_gru_hidden,
            embed_width=self.model_embed_width,
            guide_hidden=self.model_guide_hidden,
            n_layers=self.model_n_layers, n_heads=self.model_n_heads,
            adapted_blocks=self.model_adapted_blocks,
            lora_rank=self.model_lora_rank, lora_scale=self.model_lora_scale,
            adapt_value_output=self.model_adapt_value_output,
            intervals_per_day=self.model_intervals_per_day,
            week_period=self.model_week_period,
            steps_per_interval=self.model_steps_per_interval,
            scale_hidden=self.model_scale_hidden,
            scale_center=self.model_scale_center,
            scale_spread=self.model_scale_spread,
            scale_floor=self.model_scale_floor,
            gate_hidden=self.model_gate_hidden, kernel=self.model_kernel,
            bias_intensity=self.model_bias_intensity,
            use_positional=self.model_use_positional,
            dropout=self.model_dropout)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.train_alpha, lr=self.train_lr,
            warmup_steps=self.train_warmup_steps,
            total_steps=self.train_total_steps,
            weight_decay=self.train_weight_decay,
            beta1=self.train_beta1, beta2=self.train_beta2,
            adam_eps=self.train_adam_eps, batch_size=self.train_batch_size,
            patience=self.train_patience, mask_low=self.train_mask_low,
            mask_high=self.train_mask_high,
            block_masks=self.train_block_masks, train_stride=self.train_stride,
            seed=self.train_seed)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if kind in ("bool", bool):
        lowered = text.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"config key {key}: {text!r} is not a boolean")
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {text!r}") from None
    return text


def _apply(cfg: RunConfig, pairs: dict, source: str) -> RunConfig:
    unknown = sorted(set(pairs) - set(_FIELD_TYPES))
    if unknown:
        raise ValueError(f"unknown config keys from {source}: "
                         f"{', '.join(unknown)}")
    parsed = {key: _parse_value(key, text) for key, text in pairs.items()}
    return replace(cfg, **parsed)


def read_config_file(path) -> dict:
    """Flat `key = value` lines; # comments and blanks allowed."""
    pairs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key in pairs:
                raise ValueError(f"{path}:{lineno}: duplicate key {key}")
            pairs[key] = value.strip()
    return pairs


def _env_pairs(environ) -> dict:
    pairs = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            pairs[name[len(ENV_PREFIX):].lower()] = value
    return pairs


def load_config(path=None, overrides=(), environ=None) -> RunConfig:
    """Layered load.  `overrides` holds CLI `key=value` strings and wins
    over both the file and the environment."""
    cfg = RunConfig()
    if path is not None:
        cfg = _apply(cfg, read_config_file(path), str(path))
    env = os.environ if environ is None else environ
    cfg = _apply(cfg, _env_pairs(env), "environment")
    cli = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cli[key.strip()] = value.strip()
    return _apply(cfg, cli, "command line")


def to_text(cfg: RunConfig) -> str:
    """Canonical serialization: sorted keys, repr-stable values."""
    lines = []
    for name in sorted(_FIELD_TYPES):
        value = getattr(cfg, name)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{name} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode("utf-8")).hexdigest()
