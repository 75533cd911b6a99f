"""Layer containers (conv, batch norm) and the SGD-with-momentum step.

Every layer is constructed with its full dotted name and draws its initial
values from an RNG seeded by (global seed, crc32(name)). Two models built
from the same seed therefore agree bit-for-bit on every parameter they share,
no matter which extra layers either of them has.
"""
from __future__ import annotations

import zlib

import numpy as np

from . import config, ops
from .autodiff import Parameter, Tensor


def seeded_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def make_seeder(seed: int):
    return lambda name: seeded_rng(seed, name)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(config.dtype())


class Conv2d:
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, dilation: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None,
                 weight_init: str = "he", bias_init: float = 0.0):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_channels, in_channels, kernel, kernel)
        if weight_init == "he":
            w = he_normal(rng, shape, in_channels * kernel * kernel)
        elif weight_init == "small":
            # near-identity conditioning branches: small but nonzero so the
            # layers beneath receive gradient from the first step
            w = he_normal(rng, shape, in_channels * kernel * kernel) * 0.25
        elif weight_init == "zero":
            w = np.zeros(shape, dtype=config.dtype())
        else:
            raise ValueError(f"unknown weight_init {weight_init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.full(out_channels, bias_init, dtype=config.dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def named_parameters(self):
        yield self.name + ".weight", self.weight
        if self.bias is not None:
            yield self.name + ".bias", self.bias

    def named_buffers(self):
        return ()


class BatchNorm2d:
    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels
        self.scale = Parameter(np.ones(channels, dtype=config.dtype()))
        self.shift = Parameter(np.zeros(channels, dtype=config.dtype()))
        self.running = ops.RunningStats(channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.batch_norm(x, self.scale, self.shift, self.running, train)

    def named_parameters(self):
        yield self.name + ".scale", self.scale
        yield self.name + ".shift", self.shift

    def named_buffers(self):
        if self.running.initialized:
            yield self.name + ".running_mean", self.running.mean
            yield self.name + ".running_var", self.running.var

    def load_buffer(self, suffix: str, value: np.ndarray) -> None:
        if suffix == "running_mean":
            self.running.mean = value.astype(np.float64)
        elif suffix == "running_var":
            self.running.var = value.astype(np.float64)
        else:
            raise KeyError(suffix)
        self.running.initialized = True


def sgd_step(params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """buffer <- momentum*buffer + grad + wd*param; param <- param - lr*buffer.

    Gradients are cleared afterwards; a missing gradient is an error.
    """
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient (did backward run?)")
        p.momentum_buf *= momentum
        p.momentum_buf += p.grad + weight_decay * p.data
        p.data -= lr * p.momentum_buf
        p.grad = None
