"""Run configuration: a flat ``key = value`` text format with typed defaults.

Defaults follow the full-size published setup where one exists; the rest are
engineering choices documented next to each field.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .critic import Critic
from .losses import LossWeights
from .recognizer import ArcFaceConfig
from .topology import BlockSpec, NetworkSpec


class ConfigError(ValueError):
    pass


def _ints(s) -> tuple[int, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    return tuple(int(v) for v in str(s).split(",") if v.strip())


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # generator
    num_blocks: int = 6
    num_layers: int = 6
    growth_rate: int = 32
    base: int = 2
    llfe_channels: int = 64
    bottleneck_channels: int = 128
    upscale_factor: int = 4
    upsample_channels: int = 16
    kernel_size: int = 3
    crop: int = 112
    # critic
    critic_widths: tuple = (64, 128, 256, 512, 512)
    critic_slope: float = 0.2
    gp_weight: float = 10.0
    n_critic: int = 1
    # recognizer
    arcface_scale: float = 64.0
    arcface_margin: float = 0.5
    embedding_dim: int = 512
    recognizer_widths: tuple = (16, 32, 64, 64)
    # perceptual feature extractor
    perceptual_widths: tuple = (16, 32, 32)
    # loss weights: joint phase, then gan_pretrain
    lambda_pixel: float = 1.0
    lambda_perceptual: float = 0.05
    lambda_adversarial: float = 0.001
    lambda_identity: float = 0.01
    pretrain_lambda_pixel: float = 1.0
    pretrain_lambda_perceptual: float = 0.05
    pretrain_lambda_adversarial: float = 0.001
    pretrain_lambda_identity: float = 0.0
    # optimization
    batch_size: int = 128
    fr_batch_size: int = 256
    gan_lr: float = 1e-3
    gan_decay_steps: tuple = (30000, 45000)
    gan_total_steps: int = 56000
    fr_lr: float = 1e-2
    fr_decay_epochs: tuple = (15, 18)
    fr_epochs: int = 20
    joint_lr: float = 1e-4
    joint_epochs: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sgd_momentum: float = 0.9
    steps: int = 0  # >0 caps the phase at this many iterations
    checkpoint_every: int = 0
    # io / evaluation
    manifest: str = ""
    out_dir: str = "runs"
    checkpoint: str = ""
    ssim_window: str = "gaussian"
    verification_pairs: int = 200

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "tuple" and not isinstance(v, tuple):
                object.__setattr__(self, f.name, _ints(v))
        if self.crop % self.upscale_factor:
            raise ConfigError("crop must be divisible by upscale_factor")
        if self.ssim_window not in ("gaussian", "block8"):
            raise ConfigError(f"ssim_window must be gaussian or block8, got {self.ssim_window!r}")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        try:
            self.network_spec()
            self.loss_weights("joint")
            self.loss_weights("gan_pretrain")
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # --- derived objects ---------------------------------------------------

    def network_spec(self) -> NetworkSpec:
        block = BlockSpec(self.num_layers, self.growth_rate, self.llfe_channels, self.kernel_size, self.base)
        return NetworkSpec(self.num_blocks, self.llfe_channels, self.bottleneck_channels,
                           self.upscale_factor, self.upsample_channels, block)

    def loss_weights(self, phase: str) -> LossWeights:
        p = "pretrain_" if phase == "gan_pretrain" else ""
        return LossWeights(*(getattr(self, f"{p}lambda_{k}")
                             for k in ("pixel", "perceptual", "adversarial", "identity")))

    def arcface(self, num_classes: int) -> ArcFaceConfig:
        return ArcFaceConfig(self.arcface_scale, self.arcface_margin, num_classes, self.embedding_dim)

    def sub_seed(self, name: str) -> int:
        """Independent seed per named stream (data, init, gan, fr, eval)."""
        digest = hashlib.sha256(name.encode()).digest()
        ss = np.random.SeedSequence([self.seed, int.from_bytes(digest[:4], "little")])
        return int(ss.generate_state(1)[0])

    # --- text format -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def updated(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return replace(self, **coerce(overrides))


def desk_config(**overrides) -> RunConfig:
    """Small configuration used for CPU-scale runs."""
    base = dict(
        num_blocks=2, num_layers=3, growth_rate=8, llfe_channels=64, bottleneck_channels=64,
        upsample_channels=16, critic_widths=(16, 32, 64, 64, 64), embedding_dim=64,
        batch_size=8, fr_batch_size=8,
    )
    base.update(overrides)
    return RunConfig(**coerce(base))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(values: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for k, v in values.items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        typ = _FIELDS[k].type
        try:
            if typ == "tuple":
                out[k] = _ints(v)
            elif typ == "int":
                out[k] = int(v)
            elif typ == "float":
                out[k] = float(v)
            else:
                out[k] = str(v)
        except ValueError:
            raise ConfigError(f"bad value for {k}: {v!r}") from None
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {k!r}")
        values[k] = v
    return values


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    values.update(overrides or {})
    return RunConfig(**coerce(values))


def build_critic(cfg: RunConfig) -> Critic:
    return Critic(cfg.crop, cfg.critic_widths, negative_slope=cfg.critic_slope)


def load_config_text(text: str) -> RunConfig:
    return RunConfig(**coerce(parse_config_text(text)))
