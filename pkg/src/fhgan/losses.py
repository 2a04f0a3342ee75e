"""Generator-side losses and their weighted combination.

Every squared-error term is a plain mean over batch *and* elements, so loss
weights do not depend on image resolution or embedding size.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Sequence

import math

import torch
import torch.nn as nn


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def pixel_loss(hr_batch: torch.Tensor, sr_batch: torch.Tensor) -> torch.Tensor:
    return _mse(hr_batch, sr_batch)


class FeatureExtractor(nn.Module):
    """Frozen, seeded random conv stack used as the perceptual feature map.

    Stand-in for a pretrained classification network; any module mapping
    images to feature maps can be passed to :func:`perceptual_loss` instead.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 32), seed: int = 0, in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        cin = in_channels
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            cin = w
        # last conv output, no trailing activation
        self.net = nn.Sequential(*layers[:-1])
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def perceptual_loss(phi: Callable[[torch.Tensor], torch.Tensor], hr_batch, sr_batch) -> torch.Tensor:
    if hr_batch.shape != sr_batch.shape:
        raise ValueError(f"shape mismatch {tuple(hr_batch.shape)} vs {tuple(sr_batch.shape)}")
    return _mse(phi(hr_batch), phi(sr_batch))


def identity_loss(recognizer: Callable[[torch.Tensor], torch.Tensor], hr_batch, sr_batch) -> torch.Tensor:
    """Squared embedding distance between HR and SR, ``recognizer`` returning unit embeddings."""
    if hr_batch.shape != sr_batch.shape:
        raise ValueError(f"shape mismatch {tuple(hr_batch.shape)} vs {tuple(sr_batch.shape)}")
    return _mse(recognizer(hr_batch), recognizer(sr_batch))


def adversarial_g_term(critic: Callable[[torch.Tensor], torch.Tensor], sr_batch) -> torch.Tensor:
    if sr_batch.shape[0] == 0:
        raise ValueError("empty batch")
    return -critic(sr_batch).mean()


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 1.0
    perceptual: float = 0.05
    adversarial: float = 0.001
    identity: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    pixel: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    identity: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).item() for f in fields(self)}


def total_loss(pixel, perceptual, adversarial, identity, weights: LossWeights) -> LossBreakdown:
    as_t = lambda v: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
    pixel, perceptual, adversarial, identity = map(as_t, (pixel, perceptual, adversarial, identity))
    total = (weights.pixel * pixel + weights.perceptual * perceptual
             + weights.adversarial * adversarial + weights.identity * identity)
    return LossBreakdown(pixel, perceptual, adversarial, identity, total)
