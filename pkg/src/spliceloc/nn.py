"""Minimal layer/module system on top of the tensor core.

Modules discover parameters and submodules by scanning instance attributes
in definition order, which keeps checkpoint names and optimizer traversal
deterministic. Weight init draws from a caller-supplied numpy Generator so
a seed fully determines a model.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, add, conv2d, relu, reshape, tmean


class ConfigError(RuntimeError):
    """Module used in a state it was not prepared for."""


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        buffers = getattr(self, "_buffers", None)
        if buffers:
            for name, value in buffers.items():
                yield f"{prefix}{name}", value
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self._walk():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _walk(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value._walk()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._walk()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_count(module: Module) -> int:
    return sum(p.size for p in module.parameters())


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype) -> Tensor:
    std = float(np.sqrt(2.0 / fan_in))
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype),
                  requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 pad: int = 0, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.stride = stride
        self.pad = pad
        self.weight = he_normal(rng, (out_ch, in_ch, kernel, kernel),
                                in_ch * kernel * kernel, dtype)
        self.bias = (Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
                     if bias else None)

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        if self.bias is not None:
            out = add(out, reshape(self.bias, (1, self.bias.size, 1, 1)))
        return out


class BatchNorm2d(Module):
    """Per-channel normalization over batch and spatial dims.

    Train mode normalizes with the batch statistics (biased variance) and
    updates running stats as ``running = (1 - momentum) * running +
    momentum * batch``; infer mode uses the running stats and refuses to
    run before any were recorded.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 *, dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
            "batches_tracked": np.zeros(1, dtype=np.int64),
        }

    def forward(self, x: Tensor) -> Tensor:
        c = self.scale.size
        if self.training:
            m = tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = add(x, m * -1.0)
            v = tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
            buf = self._buffers
            mom = self.momentum
            buf["running_mean"][:] = ((1 - mom) * buf["running_mean"]
                                      + mom * m.data.reshape(c))
            buf["running_var"][:] = ((1 - mom) * buf["running_var"]
                                     + mom * v.data.reshape(c))
            buf["batches_tracked"][0] += 1
            inv = (v + self.eps) ** -0.5
            xhat = centered * inv
        else:
            if self._buffers["batches_tracked"][0] == 0:
                raise ConfigError(
                    "BatchNorm2d in infer mode before any statistics were recorded"
                )
            rm = Tensor(self._buffers["running_mean"].reshape(1, c, 1, 1))
            rv = self._buffers["running_var"].reshape(1, c, 1, 1)
            inv = Tensor(1.0 / np.sqrt(rv + self.eps))
            xhat = add(x, rm * -1.0) * inv
        out = add(xhat * reshape(self.scale, (1, c, 1, 1)),
                  reshape(self.shift, (1, c, 1, 1)))
        return out


class ConvBnRelu(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 pad: int = 0, *, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, pad, bias=False,
                           rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))
