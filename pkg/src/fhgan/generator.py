"""DSNet: the sparse-aggregation super-resolution generator.

Stages: two low-level feature extractor convs, ``B`` sparse blocks fed by a
running concatenation of (LLFE output, block outputs), a 1x1 bottleneck, one
conv + pixel-shuffle upsampling stage, and a linear 3-channel reconstruction.
All convolutions use same-padding, so spatial size only changes at the shuffle.
"""

from __future__ import annotations

from typing import Iterable, Optional

import torch
import torch.nn as nn

from .topology import (
    AggregationPlan,
    BlockSpec,
    NetworkSpec,
    bottleneck_input_channels,
    layer_input_channels,
)


def _conv(cin: int, cout: int, k: int) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, k, padding=k // 2)
    nn.init.kaiming_normal_(conv.weight, a=0.25, mode="fan_in", nonlinearity="leaky_relu")
    nn.init.zeros_(conv.bias)
    return conv


def _prelu() -> nn.PReLU:
    return nn.PReLU(num_parameters=1, init=0.25)


class SparseBlock(nn.Module):
    """Block of conv+PReLU layers with exponential-offset concatenation.

    Layer ``l`` sees ``cat([y_p for p in plan[l]])`` with ``p`` descending;
    ``y_0`` is the block input. The block returns the last layer only.
    """

    def __init__(self, block: BlockSpec, plan: Optional[AggregationPlan] = None):
        super().__init__()
        self.spec = block
        self.plan = plan if plan is not None else block.plan("sparse")
        if self.plan.num_layers != block.num_layers:
            raise ValueError("plan and block disagree on layer count")
        self.convs = nn.ModuleList()
        self.acts = nn.ModuleList()
        for l in range(1, block.num_layers + 1):
            cin = layer_input_channels(self.plan, block, l)
            self.convs.append(_conv(cin, block.growth_rate, block.kernel_size))
            self.acts.append(_prelu())

    def trace(
        self, x: torch.Tensor, zero: Iterable[int] = (), at: Optional[int] = None
    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Run the block and return (outputs y_0..y_L, pre-activations of layers 1..L).

        Outputs listed in ``zero`` are replaced by zeros before being consumed
        (ablation probe). With ``at=l`` the replacement only applies to the
        input gathered by layer ``l``; every other layer sees the real values.
        """
        if x.shape[1] != self.spec.input_channels:
            raise ValueError(f"block expects {self.spec.input_channels} channels, got {x.shape[1]}")
        zero = set(zero)
        ys = [x]
        pre = []
        for l in range(1, self.plan.num_layers + 1):
            masked = at is None or at == l
            inp = torch.cat([torch.zeros_like(ys[p]) if masked and p in zero else ys[p]
                             for p in self.plan[l]], dim=1)
            z = self.convs[l - 1](inp)
            pre.append(z)
            ys.append(self.acts[l - 1](z))
        return ys, pre

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trace(x)[0][-1]


class Upsampler(nn.Module):
    """conv -> pixel shuffle -> PReLU."""

    def __init__(self, in_channels: int, out_channels: int, factor: int, kernel_size: int = 3):
        super().__init__()
        self.factor = factor
        self.conv = _conv(in_channels, out_channels * factor ** 2, kernel_size)
        self.shuffle = nn.PixelShuffle(factor)
        self.act = _prelu()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.shuffle(self.conv(x)))


class DSNet(nn.Module):
    def __init__(self, spec: NetworkSpec = NetworkSpec()):
        super().__init__()
        self.spec = spec
        k = spec.block.kernel_size
        self.llfe0 = _conv(spec.image_channels, spec.llfe_channels, k)
        self.act0 = _prelu()
        self.llfe1 = _conv(spec.llfe_channels, spec.llfe_channels, k)
        self.act1 = _prelu()
        self.blocks = nn.ModuleList(SparseBlock(spec.block_spec(b)) for b in range(spec.num_blocks))
        self.bottleneck = _conv(bottleneck_input_channels(spec), spec.bottleneck_channels, 1)
        self.bottleneck_act = _prelu()
        self.upsample = Upsampler(spec.bottleneck_channels, spec.upsample_channels, spec.upscale_factor, k)
        self.reconstruct = _conv(spec.upsample_channels, spec.image_channels, k)
        with torch.no_grad():
            # linear head starts near zero output; full fan-in scale slows early fitting
            self.reconstruct.weight.mul_(0.1)

    def llfe(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != self.spec.image_channels:
            raise ValueError(f"expected N x {self.spec.image_channels} x h x w input, got {tuple(x.shape)}")
        y0 = self.act0(self.llfe0(x))
        y1 = self.act1(self.llfe1(y0))
        return y0, y1

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Bottleneck output (N x bottleneck_channels x h x w)."""
        _, y1 = self.llfe(x)
        feats = [y1]
        for block in self.blocks:
            feats.append(block(torch.cat(feats, dim=1)))
        return self.bottleneck_act(self.bottleneck(torch.cat(feats, dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reconstruct(self.upsample(self.features(x)))


def count_parameters(model: nn.Module) -> dict[str, int]:
    """Split parameter totals into kernels, biases and PReLU slopes."""
    out = {"kernels": 0, "biases": 0, "prelu": 0}
    for name, p in model.named_parameters():
        if isinstance(_owner(model, name), nn.PReLU):
            out["prelu"] += p.numel()
        elif name.endswith("bias"):
            out["biases"] += p.numel()
        else:
            out["kernels"] += p.numel()
    return out


def _owner(model: nn.Module, name: str) -> nn.Module:
    return model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
