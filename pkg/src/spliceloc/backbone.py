"""Compact residual encoder emitting a four-level feature pyramid.

The encoder is a standard stem (7x7 stride-2 conv, then a stride-2 average
pool) followed by four stages of basic two-conv residual blocks. Stage
outputs sit at cumulative strides 4, 8, 16 and 32 relative to the input;
width and depth come from :class:`BackboneConfig`, so desk-scale configs
train in minutes while the deep/wide preset reproduces the reference
stage-channel layout shape-for-shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, avg_pool2, relu

STAGE_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        if self.stem_channels <= 0 or any(c <= 0 for c in self.stage_channels):
            raise ValueError("BackboneConfig: channel counts must be positive")
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("BackboneConfig: exactly four stages")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("BackboneConfig: blocks_per_stage entries must be >= 1")

    @staticmethod
    def desk() -> "BackboneConfig":
        return BackboneConfig(16, (16, 32, 64, 128), (1, 1, 1, 1))

    @staticmethod
    def deep() -> "BackboneConfig":
        """Reference-depth preset: stage widths 256..2048, depths 3/4/23/3."""
        return BackboneConfig(64, (256, 512, 1024, 2048), (3, 4, 23, 3))


@dataclass
class FeaturePyramid:
    """Per-stage feature maps of one branch, strides 4/8/16/32."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    @property
    def levels(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.f1, self.f2, self.f3, self.f4)


def pyramid_shapes(cfg: BackboneConfig, h: int, w: int) -> list[tuple[int, int, int]]:
    """(channels, height, width) per level, by the stride contract alone."""
    if h % 32 or w % 32:
        raise ValueError(f"input dims must be divisible by 32, got {h}x{w}")
    return [(c, h // s, w // s)
            for c, s in zip(cfg.stage_channels, STAGE_STRIDES)]


class ResidualBlock(Module):
    """conv-norm-relu-conv-norm plus shortcut, relu on the sum.

    The shortcut is the identity when shapes match and a strided 1x1
    projection otherwise.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        if stride not in (1, 2):
            raise ValueError(f"ResidualBlock stride must be 1 or 2, got {stride}")
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, bias=False,
                            rng=rng, dtype=dtype)
        self.norm1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, bias=False,
                            rng=rng, dtype=dtype)
        self.norm2 = BatchNorm2d(out_ch, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride, 0, bias=False,
                                   rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        branch = self.norm2(self.conv2(relu(self.norm1(self.conv1(x)))))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return relu(branch + skip)


class Backbone(Module):
    """Stem plus four residual stages, exposed stage-by-stage.

    The three-stream encoder interleaves fusion between stages, so
    :meth:`stem` and :meth:`stage` are public; :meth:`forward` composes
    them for single-stream use.
    """

    def __init__(self, cfg: BackboneConfig, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        self.stem_conv = Conv2d(3, cfg.stem_channels, 7, 2, 3, bias=False,
                                rng=rng, dtype=dtype)
        self.stem_norm = BatchNorm2d(cfg.stem_channels, dtype=dtype)
        self.stages: list[list[ResidualBlock]] = []
        in_ch = cfg.stem_channels
        for i, (out_ch, depth) in enumerate(
                zip(cfg.stage_channels, cfg.blocks_per_stage)):
            first_stride = 1 if i == 0 else 2
            blocks = [ResidualBlock(in_ch, out_ch, first_stride, rng=rng,
                                    dtype=dtype)]
            for _ in range(depth - 1):
                blocks.append(ResidualBlock(out_ch, out_ch, 1, rng=rng,
                                            dtype=dtype))
            self.stages.append(blocks)
            in_ch = out_ch

    def stem(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"backbone expects Bx3xHxW frames, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(
                f"input dims must be divisible by 32, got {x.shape[2]}x{x.shape[3]}"
                " (resizing is the data pipeline's job)"
            )
        return avg_pool2(relu(self.stem_norm(self.stem_conv(x))))

    def stage(self, index: int, x: Tensor) -> Tensor:
        for block in self.stages[index]:
            x = block(x)
        return x

    def forward(self, x: Tensor) -> FeaturePyramid:
        x = self.stem(x)
        taps = []
        for i in range(4):
            x = self.stage(i, x)
            taps.append(x)
        return FeaturePyramid(*taps)
