"""Hierarchical edge probability maps, the conditioning input.

A deterministic classical extractor stands in for a learned edge network:
per scale, Gaussian blur (sigma doubling per level), Sobel gradient
magnitude, normalization by the 99th-percentile response, clamp to [0, 1],
then resize to the scale's resolution. Maps are treated as frozen inputs:
gradients never flow into them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np
from scipy import ndimage

from . import config
from .autodiff import Tensor, no_grad
from .checkpoint import load_arrays, save_arrays
from .ops import bilinear_resize

NUM_SCALES = 3
MIN_SIZE = 8


@dataclass
class EdgeStack:
    """Single-channel edge maps at 1/1, 1/2 and 1/4 of the image resolution."""
    scales: list = field(default_factory=list)  # Tensors, each (N, 1, h_i, w_i)
    source: str = "computed"


def scale_dims(h: int, w: int, level: int) -> tuple[int, int]:
    return ceil(h / 2 ** level), ceil(w / 2 ** level)


def edge_scales_array(image: np.ndarray) -> list[np.ndarray]:
    """Edge maps for one (H, W) image in [0, 1]; returns float arrays."""
    h, w = image.shape
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"edge extraction needs at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    img = image.astype(np.float64)
    out = []
    for level in range(NUM_SCALES):
        blurred = ndimage.gaussian_filter(img, sigma=float(2 ** level), mode="reflect")
        gx = ndimage.sobel(blurred, axis=1, mode="reflect")
        gy = ndimage.sobel(blurred, axis=0, mode="reflect")
        mag = np.hypot(gx, gy)
        p99 = np.percentile(mag, 99)
        if p99 > 1e-12:
            mag = np.clip(mag / p99, 0.0, 1.0)
        else:
            mag = np.zeros_like(mag)
        th, tw = scale_dims(h, w, level)
        if (th, tw) != (h, w):
            with no_grad():
                mag = bilinear_resize(Tensor(mag.astype(config.dtype())[None, None]), th, tw).data[0, 0]
            mag = np.clip(mag, 0.0, 1.0)
        out.append(mag.astype(config.dtype()))
    return out


def hierarchical_edges(image) -> EdgeStack:
    """EdgeStack for a (1, 1, H, W) image tensor with values in [0, 1]."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 1:
        raise ValueError(f"hierarchical_edges expects a 1x1xHxW image, got shape {data.shape}")
    if data.min() < -1e-6 or data.max() > 1.0 + 1e-6:
        raise ValueError("hierarchical_edges: image values must lie in [0, 1]")
    maps = edge_scales_array(data[0, 0])
    return EdgeStack(scales=[Tensor(m[None, None]) for m in maps], source="computed")


def stack_edges(per_image: list[list[np.ndarray]]) -> EdgeStack:
    """Batch per-image edge map lists into one EdgeStack of (N,1,h,w) tensors."""
    scales = []
    for level in range(NUM_SCALES):
        scales.append(Tensor(np.stack([maps[level] for maps in per_image])[:, None]))
    return EdgeStack(scales=scales, source="computed")


def save_edge_maps(stack: EdgeStack, path) -> None:
    arrays = {f"edge.scale{i}": t.data[0, 0] for i, t in enumerate(stack.scales)}
    save_arrays(arrays, path)


def load_edge_maps(path, expected_hw: tuple[int, int]) -> EdgeStack:
    """Load a saved stack, validating scale dimensions and value range."""
    arrays = load_arrays(path)  # missing file -> FileNotFoundError
    h, w = expected_hw
    scales = []
    for level in range(NUM_SCALES):
        key = f"edge.scale{level}"
        if key not in arrays:
            raise ValueError(f"{path}: missing entry {key}")
        arr = arrays[key]
        want = scale_dims(h, w, level)
        if arr.shape != want:
            raise ValueError(f"{path}: {key} has shape {arr.shape}, expected {want}")
        if arr.min() < -1e-3 or arr.max() > 1.0 + 1e-3:
            raise ValueError(f"{path}: {key} values outside [0, 1] beyond tolerance")
        arr = np.clip(arr, 0.0, 1.0)
        scales.append(Tensor(arr[None, None].astype(config.dtype())))
    return EdgeStack(scales=scales, source="loaded")
