"""Tensor primitives shared by the model, the event engine and the trainer.

A feature map is a plain ``numpy`` array of shape ``(H, W, C)``. A patch grid
is a 2-D array of shape ``(N * N, P * P * C)`` whose rows are flattened patches
in row-major patch order, each flattened in (row, col, channel) order.

Every function here preserves the dtype of its floating-point inputs, so the
same code runs at 32-bit for inference and at 64-bit for gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from evmlp.errors import ShapeError

DEFAULT_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclass
class DenseLayer:
    """Fully connected layer ``y = W x + b`` with ``W`` stored ``(out, in)``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"dense weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense bias shape {self.bias.shape} does not match out_dim {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_LN_EPS

    def __post_init__(self):
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ShapeError(
                f"layer norm gamma {self.gamma.shape} and beta {self.beta.shape} must be equal 1-D"
            )
        if not self.eps > 0:
            raise ValueError(f"layer norm epsilon must be positive, got {self.eps}")

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Apply ``layer`` to a vector or to each row of a 2-D batch."""
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] != layer.in_dim:
        raise ShapeError(
            f"dense input has {x.shape[-1] if x.ndim else 0} features, layer expects {layer.in_dim}"
        )
    return x @ layer.weight.T + layer.bias


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = np.asarray(x)
    half = x.dtype.type(0.5) if x.dtype.kind == "f" else 0.5
    scale = x.dtype.type(_INV_SQRT2) if x.dtype.kind == "f" else _INV_SQRT2
    return x * (half * (1 + erf(x * scale)))


def layer_norm(params: LayerNormParams, x: np.ndarray) -> np.ndarray:
    """Normalize the last axis with population variance, then scale and shift."""
    x = np.asarray(x)
    if x.shape[-1] != params.dim:
        raise ShapeError(f"layer norm input has {x.shape[-1]} features, expects {params.dim}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    eps = x.dtype.type(params.eps) if x.dtype.kind == "f" else params.eps
    return params.gamma * (centered / np.sqrt(var + eps)) + params.beta


def avg_pool_2d(grid: np.ndarray, stride: int) -> np.ndarray:
    """Non-overlapping ``stride x stride`` mean pooling of a single-channel grid.

    The window sum is taken first and divided once, so on nonnegative input a
    cell is zero exactly when its whole window is zero.
    """
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ShapeError(f"avg_pool_2d expects a 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    if stride < 1 or h % stride or w % stride:
        raise ShapeError(f"grid {h}x{w} is not divisible by pooling stride {stride}")
    windows = grid.reshape(h // stride, stride, w // stride, stride)
    return windows.sum(axis=(1, 3)) / (stride * stride)


def patchify(x: np.ndarray, patch_side: int) -> np.ndarray:
    """Split an ``(H, W, C)`` map into rows of flattened ``P x P x C`` patches."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"feature map must be (H, W, C), got shape {x.shape}")
    h, w, c = x.shape
    p = patch_side
    if p < 1 or h % p or w % p:
        raise ShapeError(f"feature map {h}x{w} is not divisible by patch side {p}")
    blocks = x.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape((h // p) * (w // p), p * p * c)


def unpatchify(
    patches: np.ndarray,
    patch_side: int,
    channels: int,
    grid: tuple[int, int] | None = None,
) -> np.ndarray:
    """Inverse of :func:`patchify`.

    ``grid`` is the ``(rows, cols)`` patch layout; a square layout is assumed
    when omitted. With ``patch_side=1`` each row becomes one output pixel.
    """
    patches = np.asarray(patches)
    if patches.ndim != 2:
        raise ShapeError(f"patch grid must be 2-D, got shape {patches.shape}")
    count, dim = patches.shape
    p = patch_side
    if p < 1 or channels < 1 or dim != p * p * channels:
        raise ShapeError(
            f"patch length {dim} does not equal {p}x{p}x{channels}"
        )
    if grid is None:
        n = math.isqrt(count)
        if n * n != count:
            raise ShapeError(f"{count} patches do not form a square grid")
        grid = (n, n)
    rows, cols = grid
    if rows * cols != count:
        raise ShapeError(f"{count} patches do not fill a {rows}x{cols} grid")
    blocks = patches.reshape(rows, cols, p, p, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(rows * p, cols * p, channels)
