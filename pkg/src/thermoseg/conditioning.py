"""Feature-wise conditioning layers: FiLM, SFT, and the gated transform (GFT).

FiLM scales and shifts each channel by a single number; SFT generalizes the
scale/shift to full spatial maps; GFT additionally passes each map through a
sigmoid self-gate so noisy conditioning is attenuated elementwise:

    gate(t)  = t * sigmoid(t)
    out      = gate(gamma) * x + gate(beta)

The scale/shift maps come from two independent 3x3 convolution branches over
a modulated conditioning map (`z_hat`), which itself is produced from the raw
edge map by resize + two 3x3 convolutions (`FeatureModulation`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, as_tensor, mul, relu, reshape, sigmoid
from .nn import Conv2d
from .ops import bilinear_resize

# Root of t * sigmoid(t) = 1. Used as the gamma-branch bias so a freshly
# built GFT layer is an exact identity: gate(GATE_IDENTITY_BIAS) == 1.
GATE_IDENTITY_BIAS = 1.278464542761074


def film(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine transform; gamma/beta are length-C vectors."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"film: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    g = reshape(gamma, (1, c, 1, 1))
    b = reshape(beta, (1, c, 1, 1))
    return add(mul(x, g), b)


def sft(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Spatial feature transform: elementwise gamma * x + beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape or beta.shape != x.shape:
        raise ValueError(f"sft: gamma/beta must match x shape {x.shape}, got {gamma.shape} and {beta.shape}")
    return add(mul(gamma, x), beta)


def gft_gate(gamma: Tensor, beta: Tensor) -> tuple[Tensor, Tensor]:
    """Self-gate both maps: returns (gamma * sigmoid(gamma), beta * sigmoid(beta))."""
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.shape != beta.shape:
        raise ValueError(f"gft_gate: shapes {gamma.shape} and {beta.shape} differ")
    return mul(gamma, sigmoid(gamma)), mul(beta, sigmoid(beta))


@dataclass
class AffineParams:
    """The six tensors of one gated transform, for inspection in tests."""
    gamma: Tensor
    beta: Tensor
    gate_gamma: Tensor
    gate_beta: Tensor
    gamma_gated: Tensor
    beta_gated: Tensor


def affine_params(gamma: Tensor, beta: Tensor) -> AffineParams:
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    gg, gb = sigmoid(gamma), sigmoid(beta)
    return AffineParams(gamma, beta, gg, gb, mul(gamma, gg), mul(beta, gb))


class FeatureModulation:
    """Match a conditioning map to a target feature map's (C, H, W).

    Bilinear resize to the target resolution, then two 3x3 convolutions with
    a halving bottleneck (in -> C/2 -> C) and a relu in between.
    """

    def __init__(self, name: str, in_channels: int, target_channels: int, seeder):
        if target_channels < 1:
            raise ValueError(f"feature modulation: target channels {target_channels} must be positive")
        mid = max(target_channels // 2, 1)
        self.name = name
        self.conv1 = Conv2d(name + ".mod1", in_channels, mid, 3, padding=1, rng=seeder(name + ".mod1"))
        self.conv2 = Conv2d(name + ".mod2", mid, target_channels, 3, padding=1, rng=seeder(name + ".mod2"))

    def __call__(self, z: Tensor, target_h: int, target_w: int) -> Tensor:
        if target_h < 1 or target_w < 1:
            raise ValueError(f"feature modulation: target size {target_h}x{target_w} must be positive")
        z = bilinear_resize(as_tensor(z), target_h, target_w)
        return self.conv2(relu(self.conv1(z)))

    def children(self):
        return [self.conv1, self.conv2]

    def named_parameters(self):
        yield from self.conv1.named_parameters()
        yield from self.conv2.named_parameters()

    def named_buffers(self):
        return ()


def gft_apply(x: Tensor, z_hat: Tensor, gamma_conv: Conv2d, beta_conv: Conv2d,
              gated: bool = True) -> Tensor:
    """Produce gamma/beta from `z_hat` via the two branches, gate, transform."""
    x, z_hat = as_tensor(x), as_tensor(z_hat)
    if z_hat.shape != x.shape:
        raise ValueError(f"gft_apply: z_hat shape {z_hat.shape} must equal x shape {x.shape}")
    gamma = gamma_conv(z_hat)
    beta = beta_conv(z_hat)
    if gated:
        gamma, beta = gft_gate(gamma, beta)
    return sft(x, gamma, beta)


class GFTLayer:
    """Edge-conditioned transform of one feature map.

    `gated=False` drops the information-control gate, which turns the layer
    into a plain SFT over the same branches (the ablation baseline for the
    gate). Branch weights start at zero with the bias chosen so the initial
    transform is the identity.
    """

    def __init__(self, name: str, channels: int, seeder, gated: bool = True, edge_channels: int = 1):
        self.name = name
        self.gated = gated
        self.modulation = FeatureModulation(name, edge_channels, channels, seeder)
        gamma_bias = GATE_IDENTITY_BIAS if gated else 1.0
        self.gamma_conv = Conv2d(name + ".gamma", channels, channels, 3, padding=1,
                                 rng=seeder(name + ".gamma"), weight_init="small", bias_init=gamma_bias)
        self.beta_conv = Conv2d(name + ".beta", channels, channels, 3, padding=1,
                                rng=seeder(name + ".beta"), weight_init="small", bias_init=0.0)

    def __call__(self, x: Tensor, z: Tensor) -> Tensor:
        n, c, h, w = x.shape
        z_hat = self.modulation(z, h, w)
        return gft_apply(x, z_hat, self.gamma_conv, self.beta_conv, gated=self.gated)

    def children(self):
        return [self.modulation, self.gamma_conv, self.beta_conv]

    def named_parameters(self):
        yield from self.modulation.named_parameters()
        yield from self.gamma_conv.named_parameters()
        yield from self.beta_conv.named_parameters()

    def named_buffers(self):
        return ()
