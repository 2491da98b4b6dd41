"""Co-attention fusion blocks for the three-stream encoder.

Three building blocks live here:

* :class:`GlobalLocalGate` -- a feature map gated by a global channel
  context (bottleneck MLP on the spatially pooled vector) and a local
  spatial context (7x7 conv to one channel), both squashed by sigmoids.
  Used directly it is the "soft attention" pre-enhancement; wrapped with a
  residual (:class:`GlobalLocalAttention`) it is the context/fusion
  enhancement applied to stage outputs and to merged features.
* :class:`ParallelCoAttention` -- fuses two adjacent streams through a
  spatial correlation matrix. Both inputs are soft-attention enhanced,
  flattened row-major to C x N, projected to a lower channel dim, and
  correlated; row-softmax attention re-mixes one stream's positions,
  column-softmax the other's. Outputs are residual: input plus its
  attention-mixed enhancement.
* :class:`CrossFrameFusion` -- merges the two middle-stream outputs of the
  parallel blocks: one shared residual gate on each input, sum, then a
  second independently parameterized residual gate on the fused map.

Additive stand-ins (:class:`AdditivePair`, :class:`AdditiveMerge`,
:class:`PassThrough`) are shape-identical drop-ins with zero parameters,
so ablation variants swap in without touching any other wiring.

Flattening convention (fixed): spatial positions enumerate row-major
(row y, then column x); the correlation matrix's meaning depends on it.
"""

from __future__ import annotations

import numpy as np

from .nn import Conv2d, Module
from .tensor import (
    ShapeError,
    Tensor,
    global_avg_pool,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)


class GlobalLocalGate(Module):
    """x -> x * sigmoid(channel logits) * sigmoid(spatial logits).

    Channel branch: GAP -> 1x1 conv to C/r -> relu -> 1x1 conv to C.
    Spatial branch: kxk conv to a single channel. With all-zero
    parameters both gates are 0.5 everywhere, so the gate scales by 0.25.
    """

    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 7,
                 *, rng: np.random.Generator, dtype=np.float32):
        hidden = max(1, channels // reduction)
        self.channel_down = Conv2d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.channel_up = Conv2d(hidden, channels, 1, rng=rng, dtype=dtype)
        self.spatial = Conv2d(channels, 1, spatial_kernel, 1,
                              spatial_kernel // 2, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        channel = sigmoid(self.channel_up(relu(self.channel_down(
            global_avg_pool(x)))))
        spatial = sigmoid(self.spatial(x))
        return x * channel * spatial


class GlobalLocalAttention(Module):
    """Residual form: x + gate(x). One instance per use site; the context
    and fusion roles differ only in where they sit and whose parameters
    they own."""

    def __init__(self, channels: int, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.gate = GlobalLocalGate(channels, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.gate(x)


class ParallelCoAttention(Module):
    """Mutual enhancement of two same-shape streams via co-attention.

    For enhanced maps P', Q' flattened to (B, C, N):

        A    = eta(Q')^T  W  eta(P')          (B, N, N)
        P^   = P' . row_softmax(A)
        Q^   = Q' . col_softmax(A)

    where eta projects channels to C_l = max(1, C // 2) and W is a
    learnable C_l x C_l matrix. Returns (P + P^, Q + Q^) reshaped back to
    maps, so at init the block can only add information, never destroy it.
    """

    def __init__(self, channels: int, *, rng: np.random.Generator,
                 dtype=np.float32):
        lowdim = max(1, channels // 2)
        self.p_gate = GlobalLocalGate(channels, rng=rng, dtype=dtype)
        self.q_gate = GlobalLocalGate(channels, rng=rng, dtype=dtype)
        std = float(np.sqrt(1.0 / channels))
        self.eta = Tensor(rng.normal(0.0, std, size=(lowdim, channels))
                          .astype(dtype), requires_grad=True)
        self.corr = Tensor(rng.normal(0.0, std, size=(lowdim, lowdim))
                           .astype(dtype), requires_grad=True)

    def forward(self, p: Tensor, q: Tensor) -> tuple[Tensor, Tensor]:
        if p.shape != q.shape:
            raise ShapeError(
                f"co-attention inputs must match, got {p.shape} vs {q.shape}")
        b, c, h, w = p.shape
        n = h * w
        p_enh = reshape(self.p_gate(p), (b, c, n))
        q_enh = reshape(self.q_gate(q), (b, c, n))
        ep = matmul(self.eta, p_enh)                      # (B, C_l, N)
        eq = matmul(self.eta, q_enh)
        corr = matmul(transpose(eq, (0, 2, 1)), matmul(self.corr, ep))
        p_att = matmul(p_enh, softmax(corr, axis=-1))     # rows sum to 1
        q_att = matmul(q_enh, softmax(corr, axis=-2))     # columns sum to 1
        p_out = p + reshape(p_att, (b, c, h, w))
        q_out = q + reshape(q_att, (b, c, h, w))
        return p_out, q_out


class CrossFrameFusion(Module):
    """Fuse the two middle-stream co-attention outputs into one map.

    ``context`` (shared between the two inputs, keeping the block
    symmetric in its arguments) enhances each input; ``fuse`` enhances
    their sum. Output shape equals input shape.
    """

    def __init__(self, channels: int, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.context = GlobalLocalAttention(channels, rng=rng, dtype=dtype)
        self.fuse = GlobalLocalAttention(channels, rng=rng, dtype=dtype)

    def forward(self, left: Tensor, right: Tensor) -> Tensor:
        if left.shape != right.shape:
            raise ShapeError(
                f"fusion inputs must match, got {left.shape} vs {right.shape}")
        return self.fuse(self.context(left) + self.context(right))


class AdditivePair(Module):
    """Ablation stand-in for co-attention: both outputs are P + Q."""

    def forward(self, p: Tensor, q: Tensor) -> tuple[Tensor, Tensor]:
        if p.shape != q.shape:
            raise ShapeError(
                f"additive fusion inputs must match, got {p.shape} vs {q.shape}")
        s = p + q
        return s, s


class AdditiveMerge(Module):
    """Ablation stand-in for cross-frame fusion: left + right."""

    def forward(self, left: Tensor, right: Tensor) -> Tensor:
        if left.shape != right.shape:
            raise ShapeError(
                f"merge inputs must match, got {left.shape} vs {right.shape}")
        return left + right


class PassThrough(Module):
    """Ablation stand-in for the residual gate: identity."""

    def forward(self, x: Tensor) -> Tensor:
        return x
