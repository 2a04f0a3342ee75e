"""WGAN-GP critic: a DCGAN-style strided conv stack with no normalization layers."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn


class TrainingFault(RuntimeError):
    """Non-finite value encountered during an optimization step."""


class Critic(nn.Module):
    """Stride-2 3x3 convs with leaky activations, then a linear scalar head.

    Higher scores mean "more real".
    """

    def __init__(
        self,
        image_size: int = 112,
        widths: Sequence[int] = (64, 128, 256, 512, 512),
        in_channels: int = 3,
        negative_slope: float = 0.2,
    ):
        super().__init__()
        layers: list[nn.Module] = []
        cin, size = in_channels, image_size
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1), nn.LeakyReLU(negative_slope)]
            cin, size = w, (size - 1) // 2 + 1
        self.features = nn.Sequential(*layers)
        self.image_size = image_size
        self.in_channels = in_channels
        self.head = nn.Linear(cin * size * size, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ValueError(
                f"critic expects N x {self.in_channels} x {self.image_size} x {self.image_size}, "
                f"got {tuple(x.shape)}"
            )
        return self.head(self.features(x).flatten(1)).squeeze(1)


def interpolate(hr: torch.Tensor, sr: torch.Tensor, epsilon) -> torch.Tensor:
    """``eps * hr + (1 - eps) * sr``; a per-sample ``epsilon`` broadcasts over C, H, W."""
    if hr.shape != sr.shape:
        raise ValueError(f"shape mismatch {tuple(hr.shape)} vs {tuple(sr.shape)}")
    eps = torch.as_tensor(epsilon, dtype=hr.dtype, device=hr.device)
    if torch.any(eps < 0) or torch.any(eps > 1):
        raise ValueError("epsilon must lie in [0, 1]")
    if eps.dim() == 1:
        eps = eps.view(-1, *([1] * (hr.dim() - 1)))
    return eps * hr + (1 - eps) * sr


def sample_interpolates(hr: torch.Tensor, sr: torch.Tensor, generator: Optional[torch.Generator] = None):
    """Draw one epsilon per sample and return the interpolated batch."""
    eps = torch.rand(hr.shape[0], generator=generator, dtype=hr.dtype)
    return interpolate(hr, sr, eps)


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    interpolated: torch.Tensor,
    weight: float = 10.0,
) -> torch.Tensor:
    """``weight * mean_i (||grad_x D(x_i)||_2 - 1)**2`` over the batch."""
    x = interpolated.detach().requires_grad_(True)
    scores = critic(x)
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=True)
    if not torch.isfinite(grad).all():
        raise TrainingFault("non-finite critic input gradient in gradient penalty")
    norms = grad.flatten(1).norm(2, dim=1)
    return weight * ((norms - 1) ** 2).mean()


def critic_loss(
    critic: Callable[[torch.Tensor], torch.Tensor],
    hr_batch: torch.Tensor,
    sr_batch: torch.Tensor,
    penalty=0.0,
) -> torch.Tensor:
    if hr_batch.shape[0] == 0 or sr_batch.shape[0] == 0:
        raise ValueError("empty batch")
    if hr_batch.shape[0] != sr_batch.shape[0]:
        raise ValueError("hr and sr batches differ in size")
    return critic(sr_batch).mean() - critic(hr_batch).mean() + penalty
