"""Three-stream splice-localization network and whole-video inference.

Wiring per forward pass: the three frames of a triple run through the stem
and stage 1 independently. In stages 2-4 each branch extracts its stage
features, then the two outer branches are each co-attended with the middle
branch (outer frame on the row-attention side, middle on the column side;
with shared weights this makes the network exactly mirror symmetric), and
the two middle-stream outputs are merged by cross-frame fusion. The
enhanced features feed the next stage; what the decoder sees is each
branch's enhanced stage output passed through a per-stage residual
global-local gate.

Two decoder heads (shared weights by default) hang off the outer branches
and predict tampering maps for frames t-1 and t+1; the middle frame is
covered at video level by sliding the 3-frame window and averaging every
prediction a frame receives from window positions 1 and 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .fusion import (
    AdditiveMerge,
    AdditivePair,
    CrossFrameFusion,
    GlobalLocalAttention,
    ParallelCoAttention,
    PassThrough,
)
from .nn import Conv2d, Module
from .tensor import Tensor, bilinear_upsample, concat, sigmoid


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.desk)
    decoder_dim: int = 32
    pcm: str = "coatt"        # "coatt" | "add"
    ccm: str = "coatt"        # "coatt" | "add"
    gac: str = "on"           # "on"    | "add"
    input_hw: tuple[int, int] = (64, 64)
    share_weights: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        h, w = self.input_hw
        if h % 32 or w % 32:
            raise ValueError(f"input_hw must be divisible by 32, got {h}x{w}")
        if self.pcm not in ("coatt", "add"):
            raise ValueError(f"pcm switch must be coatt|add, got {self.pcm!r}")
        if self.ccm not in ("coatt", "add"):
            raise ValueError(f"ccm switch must be coatt|add, got {self.ccm!r}")
        if self.gac not in ("on", "add"):
            raise ValueError(f"gac switch must be on|add, got {self.gac!r}")
        if self.decoder_dim < 1:
            raise ValueError("decoder_dim must be positive")

    @staticmethod
    def desk(**overrides) -> "ModelConfig":
        return ModelConfig(**overrides)

    @staticmethod
    def paper_scale() -> "ModelConfig":
        return ModelConfig(backbone=BackboneConfig.deep(), decoder_dim=256,
                           input_hw=(512, 512))


@dataclass
class FrameTriple:
    """Three consecutive frames with ground truth for the outer two.

    Frames are (3, H, W) float arrays in [0, 1]; masks are (H, W) binary
    float arrays. The middle mask rides along for bookkeeping only.
    """

    prev: np.ndarray
    cur: np.ndarray
    next: np.ndarray
    mask_prev: np.ndarray
    mask_next: np.ndarray
    mask_cur: np.ndarray | None = None

    def __post_init__(self):
        if not (self.prev.shape == self.cur.shape == self.next.shape):
            raise ValueError("triple frames must share one shape")
        if self.mask_prev.shape != self.prev.shape[1:]:
            raise ValueError("mask dims must match frame dims")


@dataclass
class LocalizationMap:
    """Per-pixel tampering probability for one frame."""

    probs: np.ndarray
    frame_index: int

    def __post_init__(self):
        if self.probs.min() < 0.0 or self.probs.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")


class MlpDecoder(Module):
    """All-linear multi-scale head.

    Each pyramid level is projected to a common width by a 1x1 linear map,
    upsampled to the stride-4 grid, concatenated, fused by one more linear
    layer, regressed to a single channel and upsampled to the input size.
    No activations anywhere: with zero weights the logits are identically
    zero, i.e. probability 0.5.
    """

    def __init__(self, in_channels: tuple[int, int, int, int], width: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.proj = [Conv2d(c, width, 1, rng=rng, dtype=dtype)
                     for c in in_channels]
        self.fuse = Conv2d(4 * width, width, 1, rng=rng, dtype=dtype)
        self.pred = Conv2d(width, 1, 1, rng=rng, dtype=dtype)

    def forward(self, pyr: FeaturePyramid, out_hw: tuple[int, int]) -> Tensor:
        h, w = out_hw
        h4, w4 = h // 4, w // 4
        ups = []
        for proj, level in zip(self.proj, pyr.levels):
            ups.append(bilinear_upsample(proj(level), h4, w4))
        fused = self.fuse(concat(ups, axis=1))
        return bilinear_upsample(self.pred(fused), h, w)


class SpliceLocNet(Module):
    """Three-stream encoder with co-attention fusion and two decoder heads."""

    def __init__(self, cfg: ModelConfig, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        bcfg = cfg.backbone
        n_streams = 1 if cfg.share_weights else 3
        self.streams = [Backbone(bcfg, rng=rng, dtype=dtype)
                        for _ in range(n_streams)]

        chans = bcfg.stage_channels
        if cfg.pcm == "coatt":
            n_pairs = 1 if cfg.share_weights else 2
            self.pair_fusion = [
                [ParallelCoAttention(chans[s], rng=rng, dtype=dtype)
                 for _ in range(n_pairs)]
                for s in (1, 2, 3)
            ]
        else:
            self.pair_fusion = [[AdditivePair()] for _ in (1, 2, 3)]
        if cfg.ccm == "coatt":
            self.mid_fusion = [CrossFrameFusion(chans[s], rng=rng, dtype=dtype)
                               for s in (1, 2, 3)]
        else:
            self.mid_fusion = [AdditiveMerge() for _ in (1, 2, 3)]
        if cfg.gac == "on":
            self.pyramid_gate = [GlobalLocalAttention(c, rng=rng, dtype=dtype)
                                 for c in chans]
        else:
            self.pyramid_gate = [PassThrough() for _ in chans]

        n_heads = 1 if cfg.share_weights else 2
        self.heads = [MlpDecoder(chans, cfg.decoder_dim, rng=rng, dtype=dtype)
                      for _ in range(n_heads)]

    # -- wiring helpers ------------------------------------------------------

    def _stream(self, branch: int) -> Backbone:
        return self.streams[0] if self.cfg.share_weights else self.streams[branch]

    def _pair(self, stage: int, side: int):
        blocks = self.pair_fusion[stage - 1]
        return blocks[0] if len(blocks) == 1 else blocks[side]

    def _head(self, side: int) -> MlpDecoder:
        return self.heads[0] if len(self.heads) == 1 else self.heads[side]

    # -- forward passes --------------------------------------------------------

    def encoder_forward(self, prev: Tensor, cur: Tensor, next_: Tensor
                        ) -> tuple[FeaturePyramid, FeaturePyramid, FeaturePyramid]:
        a = self._stream(0).stem(prev)
        b = self._stream(1).stem(cur)
        c = self._stream(2).stem(next_)
        a = self._stream(0).stage(0, a)
        b = self._stream(1).stage(0, b)
        c = self._stream(2).stage(0, c)
        taps_a = [self.pyramid_gate[0](a)]
        taps_b = [self.pyramid_gate[0](b)]
        taps_c = [self.pyramid_gate[0](c)]
        for stage in (1, 2, 3):
            a = self._stream(0).stage(stage, a)
            b = self._stream(1).stage(stage, b)
            c = self._stream(2).stage(stage, c)
            # outer frames ride the row-attention side, middle the column side
            a, mid_left = self._pair(stage, 0)(a, b)
            c, mid_right = self._pair(stage, 1)(c, b)
            b = self.mid_fusion[stage - 1](mid_left, mid_right)
            taps_a.append(self.pyramid_gate[stage](a))
            taps_b.append(self.pyramid_gate[stage](b))
            taps_c.append(self.pyramid_gate[stage](c))
        return (FeaturePyramid(*taps_a), FeaturePyramid(*taps_b),
                FeaturePyramid(*taps_c))

    def forward(self, prev: Tensor, cur: Tensor, next_: Tensor
                ) -> tuple[Tensor, Tensor]:
        """Logit maps (B, 1, H, W) for frames t-1 and t+1."""
        h, w = prev.shape[2], prev.shape[3]
        pyr_a, _, pyr_c = self.encoder_forward(prev, cur, next_)
        return (self._head(0)(pyr_a, (h, w)), self._head(1)(pyr_c, (h, w)))

    def predict_pair(self, prev: Tensor, cur: Tensor, next_: Tensor
                     ) -> tuple[np.ndarray, np.ndarray]:
        """Probability maps (B, H, W) for frames t-1 and t+1."""
        logits_a, logits_c = self.forward(prev, cur, next_)
        pa = sigmoid(logits_a).data[:, 0]
        pc = sigmoid(logits_c).data[:, 0]
        return pa, pc


def coverage_counts(n_frames: int) -> list[int]:
    """Prediction count per frame under the sliding-window protocol.

    The sequence is padded by edge replication (one frame each side) and a
    3-frame window slides with stride 1; the window centered on frame t
    yields maps for padded positions t-1 and t+1, which clamp back onto
    original frames. Every frame receives at least one map.
    """
    if n_frames < 1:
        raise ValueError("coverage requires at least one frame")
    counts = [0] * n_frames
    for t in range(n_frames):
        counts[max(t - 1, 0)] += 1
        counts[min(t + 1, n_frames - 1)] += 1
    return counts


def video_infer(model: SpliceLocNet, frames: list[np.ndarray]
                ) -> list[LocalizationMap]:
    """Per-frame tampering probability maps for a whole clip.

    Frames are (3, H, W) arrays in [0, 1], already resized to the model's
    input dims. Overlapping window predictions for one frame are averaged.
    The model's train/eval mode is left untouched.
    """
    n = len(frames)
    if n == 0:
        raise ValueError("video_infer needs at least one frame")
    h, w = frames[0].shape[1], frames[0].shape[2]
    dtype = model.streams[0].stem_conv.weight.dtype
    padded = [frames[0]] + list(frames) + [frames[-1]]
    acc = [np.zeros((h, w), dtype=np.float64) for _ in range(n)]
    counts = coverage_counts(n)
    for t in range(n):
        prev = Tensor(padded[t][None].astype(dtype))
        cur = Tensor(padded[t + 1][None].astype(dtype))
        next_ = Tensor(padded[t + 2][None].astype(dtype))
        map_prev, map_next = model.predict_pair(prev, cur, next_)
        acc[max(t - 1, 0)] += map_prev[0]
        acc[min(t + 1, n - 1)] += map_next[0]
    return [LocalizationMap(np.clip(acc[i] / counts[i], 0.0, 1.0), i)
            for i in range(n)]
