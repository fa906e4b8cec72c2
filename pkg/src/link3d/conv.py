"""Reference submanifold and strided sparse 3D convolution with analytic backward.

The convolution computes ``g_p = sum_n w_n . f_{p+n} + bias`` over the
non-empty neighbors of each output site.  Stride 1 is submanifold: the output
coordinate set equals the input's, so sparsity never dilates.  Stride 2 with a
2x2x2 kernel downsamples onto ``floor(coord / 2)``.

Pair lists in the kernel map are sorted by (out_row, in_row) and offsets are
iterated in a fixed lexicographic order, which pins the floating-point
summation order and makes results bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .core import SparseTensor, pack_keys
from .errors import ConfigError, DimensionError
from .layers import LayerNormParams, layer_norm_forward, relu


def kernel_offsets(kernel_size: int, stride: int = 1) -> np.ndarray:
    """Neighbor offsets in fixed lexicographic order.

    Stride 1 requires odd kernel_size and centers the window; stride 2 uses
    the forward window {0, 1}^3 of the K=2 downsampling kernel.
    """
    if stride == 1:
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"stride-1 kernel size must be odd, got {kernel_size}")
        half = kernel_size // 2
        rng = np.arange(-half, half + 1, dtype=np.int64)
    elif stride == 2:
        if kernel_size != 2:
            raise ConfigError(f"stride-2 supports kernel size 2, got {kernel_size}")
        rng = np.arange(0, 2, dtype=np.int64)
    else:
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


@dataclass
class KernelMap:
    """Per-offset (in_row, out_row) index pairs for an explicit sparse conv."""

    kernel_size: int
    stride: int
    offsets: np.ndarray              # (K^3, 3)
    in_rows: List[np.ndarray]        # one array per offset
    out_rows: List[np.ndarray]
    out_coords: np.ndarray           # (M, 4)
    num_in: int

    @property
    def num_out(self) -> int:
        return self.out_coords.shape[0]

    def pair_count(self) -> int:
        return int(sum(r.shape[0] for r in self.in_rows))


def build_kernel_map(t: SparseTensor, kernel_size: int, stride: int = 1) -> KernelMap:
    """Enumerate the non-empty neighbor pairs for every output site."""
    offsets = kernel_offsets(kernel_size, stride)
    if stride == 1:
        out_coords = t.coords
        query_base = t.coords
    else:
        down = t.coords.copy()
        down[:, 1:] = np.floor_divide(down[:, 1:], 2)
        # np.unique returns indices in sorted key order, fixing output row order
        _, first = np.unique(pack_keys(down), return_index=True)
        out_coords = down[first]
        query_base = out_coords.copy()
        query_base[:, 1:] *= 2
    in_rows: List[np.ndarray] = []
    out_rows: List[np.ndarray] = []
    all_out = np.arange(out_coords.shape[0], dtype=np.int64)
    for off in offsets:
        probe = query_base.copy()
        probe[:, 1:] += off
        rows = t.lookup(probe)
        hit = rows >= 0
        in_rows.append(rows[hit])
        out_rows.append(all_out[hit])
    return KernelMap(
        kernel_size=kernel_size,
        stride=stride,
        offsets=offsets,
        in_rows=in_rows,
        out_rows=out_rows,
        out_coords=out_coords,
        num_in=t.num_voxels,
    )


@dataclass
class ConvWeights:
    """Dense kernel tensor (K^3, C_in, C_out) plus optional bias."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise DimensionError(
                f"weights must be (K^3, C_in, C_out), got shape {self.weights.shape}"
            )
        if not np.isfinite(self.weights).all():
            raise ValueError("weights contain NaN or Inf")
        if self.bias is not None and self.bias.shape != (self.weights.shape[2],):
            raise DimensionError("bias length must equal C_out")

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def random(cls, kernel_size, c_in, c_out, rng, stride=1, dtype=np.float64):
        volume = kernel_offsets(kernel_size, stride).shape[0]
        scale = np.sqrt(2.0 / (volume * c_in))
        w = rng.normal(0.0, scale, size=(volume, c_in, c_out)).astype(dtype)
        return cls(w, np.zeros(c_out, dtype=dtype))

    @classmethod
    def zeros(cls, kernel_size, c_in, c_out, stride=1, dtype=np.float64):
        volume = kernel_offsets(kernel_size, stride).shape[0]
        return cls(
            np.zeros((volume, c_in, c_out), dtype=dtype),
            np.zeros(c_out, dtype=dtype),
        )

    @classmethod
    def identity_center(cls, kernel_size, channels, dtype=np.float64):
        """Zero kernel except an identity matrix at the center offset."""
        w = cls.zeros(kernel_size, channels, channels, dtype=dtype)
        center = kernel_offsets(kernel_size, 1).shape[0] // 2
        w.weights[center] = np.eye(channels, dtype=dtype)
        return w


def sparse_conv_forward(t: SparseTensor, w: ConvWeights, km: KernelMap) -> SparseTensor:
    """Apply the kernel over the precomputed pair lists."""
    if km.offsets.shape[0] != w.weights.shape[0]:
        raise DimensionError("kernel map and weights disagree on kernel volume")
    if t.num_channels != w.c_in:
        raise DimensionError(f"input has {t.num_channels} channels, weights expect {w.c_in}")
    if km.num_in != t.num_voxels:
        raise DimensionError("kernel map was built for a different tensor")
    dtype = t.dtype
    out = np.zeros((km.num_out, w.c_out), dtype=dtype)
    weights = w.weights.astype(dtype, copy=False)
    for o in range(km.offsets.shape[0]):
        ir = km.in_rows[o]
        if ir.shape[0] == 0:
            continue
        # within one offset every out_row is unique, so fancy += is exact
        out[km.out_rows[o]] += t.features[ir] @ weights[o]
    if w.bias is not None:
        out += w.bias.astype(dtype, copy=False)
    return SparseTensor(km.out_coords, out) if km.stride == 2 else t.with_features(out)


def sparse_conv_backward(grad_out: np.ndarray, t: SparseTensor, w: ConvWeights, km: KernelMap):
    """Exact adjoint of sparse_conv_forward.

    Returns (grad_features, grad_weights, grad_bias); grad_bias is None when
    the weights carry no bias.
    """
    if grad_out.shape != (km.num_out, w.c_out):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != ({km.num_out}, {w.c_out})"
        )
    dtype = t.dtype
    weights = w.weights.astype(dtype, copy=False)
    grad_features = np.zeros_like(t.features)
    grad_weights = np.zeros_like(weights)
    for o in range(km.offsets.shape[0]):
        ir = km.in_rows[o]
        if ir.shape[0] == 0:
            continue
        g = grad_out[km.out_rows[o]]
        # in_rows are also unique within one offset (the offset map is injective)
        grad_features[ir] += g @ weights[o].T
        grad_weights[o] = t.features[ir].T @ g
    grad_bias = grad_out.sum(axis=0) if w.bias is not None else None
    return grad_features, grad_weights, grad_bias


@dataclass
class ResidualBlockWeights:
    """Two 3x3x3 submanifold convolutions with their norms."""

    conv1: ConvWeights
    conv2: ConvWeights
    norm1: Optional[LayerNormParams] = None
    norm2: Optional[LayerNormParams] = None

    @classmethod
    def random(cls, channels, rng, dtype=np.float64):
        return cls(
            conv1=ConvWeights.random(3, channels, channels, rng, dtype=dtype),
            conv2=ConvWeights.random(3, channels, channels, rng, dtype=dtype),
            norm1=LayerNormParams.identity(channels, dtype=dtype),
            norm2=LayerNormParams.identity(channels, dtype=dtype),
        )


def residual_block(
    t: SparseTensor, weights: ResidualBlockWeights, norm_enabled: bool = True
) -> SparseTensor:
    """y = ReLU(Norm(Conv3(ReLU(Norm(Conv3(x))))) + x), submanifold throughout."""
    if weights.conv1.c_in != t.num_channels or weights.conv2.c_out != t.num_channels:
        raise DimensionError("residual block requires C_in == C_out == input channels")
    km = build_kernel_map(t, 3, 1)

    def maybe_norm(x, params):
        if not norm_enabled or params is None:
            return x
        y, _ = layer_norm_forward(x, params)
        return y

    h = sparse_conv_forward(t, weights.conv1, km).features
    h = relu(maybe_norm(h, weights.norm1))
    h = sparse_conv_forward(t.with_features(h), weights.conv2, km).features
    h = maybe_norm(h, weights.norm2)
    return t.with_features(relu(h + t.features))
