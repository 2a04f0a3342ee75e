"""Sparse-aggregation connectivity and channel/parameter accounting.

Layers inside a block are numbered ``1..L``; index ``0`` is the block input.
Layer ``l`` concatenates the outputs at exponential offsets ``l - c**j`` for
every ``j`` with ``c**j <= l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Union

Mode = Literal["sparse", "dense"]


def predecessors(l: int, c: int = 2) -> tuple[int, ...]:
    """Indices aggregated by layer ``l``, in descending order."""
    if c < 2:
        raise ValueError(f"base c must be >= 2, got {c}")
    if l < 1:
        raise ValueError(f"layer index must be >= 1, got {l}")
    out = []
    offset = 1
    while offset <= l:
        out.append(l - offset)
        offset *= c
    return tuple(out)


def dense_predecessors(l: int) -> tuple[int, ...]:
    if l < 1:
        raise ValueError(f"layer index must be >= 1, got {l}")
    return tuple(range(l - 1, -1, -1))


@dataclass(frozen=True)
class AggregationPlan:
    num_layers: int
    base: int = 2
    predecessors: tuple[tuple[int, ...], ...] = field(default=())

    def __getitem__(self, l: int) -> tuple[int, ...]:
        if not 1 <= l <= self.num_layers:
            raise IndexError(f"layer {l} outside 1..{self.num_layers}")
        return self.predecessors[l - 1]


def build_plan(num_layers: int, c: int = 2, mode: Mode = "sparse") -> AggregationPlan:
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    if mode == "sparse":
        sets = tuple(predecessors(l, c) for l in range(1, num_layers + 1))
    elif mode == "dense":
        if c < 2:
            raise ValueError(f"base c must be >= 2, got {c}")
        sets = tuple(dense_predecessors(l) for l in range(1, num_layers + 1))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return AggregationPlan(num_layers=num_layers, base=c, predecessors=sets)


@dataclass(frozen=True)
class BlockSpec:
    num_layers: int = 6
    growth_rate: int = 32
    input_channels: int = 64
    kernel_size: int = 3
    base: int = 2

    def __post_init__(self):
        if self.num_layers < 1 or self.input_channels < 1 or self.kernel_size < 1:
            raise ValueError(f"BlockSpec fields must be positive: {self}")
        if self.growth_rate < 0:
            raise ValueError("growth_rate must be nonnegative")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd for same-padding")

    def plan(self, mode: Mode = "sparse") -> AggregationPlan:
        return build_plan(self.num_layers, self.base, mode)


@dataclass(frozen=True)
class NetworkSpec:
    """Generator layout. Defaults are the full-size configuration."""

    num_blocks: int = 6
    llfe_channels: int = 64
    bottleneck_channels: int = 128
    upscale_factor: int = 4
    upsample_channels: int = 16
    block: BlockSpec = BlockSpec()
    image_channels: int = 3

    def __post_init__(self):
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        for name in ("llfe_channels", "bottleneck_channels", "upscale_factor",
                     "upsample_channels", "image_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.block.input_channels != self.llfe_channels:
            # first block reads the LLFE output
            object.__setattr__(self, "block", replace(self.block, input_channels=self.llfe_channels))

    def block_spec(self, b: int) -> BlockSpec:
        """Spec of block ``b`` (0-based); its input grows by ``g`` per earlier block."""
        if not 0 <= b < self.num_blocks:
            raise IndexError(f"block {b} outside 0..{self.num_blocks - 1}")
        return replace(self.block, input_channels=self.llfe_channels + b * self.block.growth_rate)


def layer_input_channels(plan: AggregationPlan, block: BlockSpec, l: int) -> int:
    if not 1 <= l <= plan.num_layers:
        raise IndexError(f"layer {l} outside 1..{plan.num_layers}")
    return sum(block.input_channels if p == 0 else block.growth_rate for p in plan[l])


def block_layer_channels(block: BlockSpec, mode: Mode = "sparse") -> list[int]:
    plan = block.plan(mode)
    return [layer_input_channels(plan, block, l) for l in range(1, block.num_layers + 1)]


def _block_params(block: BlockSpec, mode: Mode) -> int:
    k2 = block.kernel_size ** 2
    return sum(k2 * cin * block.growth_rate for cin in block_layer_channels(block, mode))


def bottleneck_input_channels(spec: NetworkSpec) -> int:
    return spec.llfe_channels + spec.num_blocks * spec.block.growth_rate


def parameter_count(spec: Union[NetworkSpec, BlockSpec], mode: Mode = "sparse") -> int:
    """Kernel weight count (biases and PReLU slopes excluded)."""
    if isinstance(spec, BlockSpec):
        return _block_params(spec, mode)
    k2 = spec.block.kernel_size ** 2
    total = k2 * spec.image_channels * spec.llfe_channels
    total += k2 * spec.llfe_channels * spec.llfe_channels
    total += sum(_block_params(spec.block_spec(b), mode) for b in range(spec.num_blocks))
    total += bottleneck_input_channels(spec) * spec.bottleneck_channels
    total += k2 * spec.bottleneck_channels * spec.upsample_channels * spec.upscale_factor ** 2
    total += k2 * spec.upsample_channels * spec.image_channels
    return total


def depth_accounting(spec: NetworkSpec) -> int:
    # LLFE pair + block convs + bottleneck + upsampling conv + reconstruction
    return 2 + spec.num_blocks * spec.block.num_layers + 3


def topology_report(spec: NetworkSpec) -> str:
    lines = [f"depth: {depth_accounting(spec)}"]
    plan = spec.block.plan("sparse")
    for l in range(1, plan.num_layers + 1):
        pred = ",".join(str(p) for p in plan[l])
        lines.append(
            f"layer {l}: predecessors {{{pred}}} in_channels "
            f"{layer_input_channels(plan, spec.block, l)}"
        )
    sparse = parameter_count(spec.block, "sparse")
    dense = parameter_count(spec.block, "dense")
    lines.append(f"block params (kernels, no bias): sparse {sparse:,} dense {dense:,} ratio {sparse / dense:.4f}"
                 if dense else f"block params (kernels, no bias): sparse {sparse:,} dense {dense:,}")
    lines.append(f"network params (kernels, no bias): sparse {parameter_count(spec, 'sparse'):,} "
                 f"dense {parameter_count(spec, 'dense'):,}")
    lines.append(f"bottleneck input channels: {bottleneck_input_channels(spec)}")
    return "\n".join(lines)
