"""Per-voxel numeric primitives with analytic backward passes.

Everything here operates on plain (N, C) feature matrices; sparse structure
is handled by the callers.  LayerNorm normalizes each voxel over its channel
dimension, which keeps it independent of batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

LN_EPS = 1e-5


@dataclass
class LayerNormParams:
    scale: np.ndarray  # (C,)
    shift: np.ndarray  # (C,)

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "LayerNormParams":
        return cls(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype))


def layer_norm_forward(x: np.ndarray, params: LayerNormParams, eps: float = LN_EPS):
    """Normalize each row over channels, then apply per-channel scale/shift.

    Returns (y, cache) where cache feeds :func:`layer_norm_backward`.
    """
    if x.shape[1] != params.scale.shape[0]:
        raise DimensionError(
            f"LayerNorm over {params.scale.shape[0]} channels applied to {x.shape[1]}"
        )
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    y = x_hat * params.scale + params.shift
    return y, (x_hat, inv_std, params.scale)


def layer_norm_backward(grad_y: np.ndarray, cache):
    """Gradients of layer_norm_forward w.r.t. input, scale, and shift."""
    x_hat, inv_std, scale = cache
    grad_shift = grad_y.sum(axis=0)
    grad_scale = (grad_y * x_hat).sum(axis=0)
    g = grad_y * scale
    g_mean = g.mean(axis=1, keepdims=True)
    gx_mean = (g * x_hat).mean(axis=1, keepdims=True)
    grad_x = inv_std * (g - g_mean - x_hat * gx_mean)
    return grad_x, grad_scale, grad_shift


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_y, 0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows plus the gradient w.r.t. logits."""
    if logits.shape[0] != labels.shape[0]:
        raise DimensionError("one label per logit row required")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = -log_probs[np.arange(n), labels].mean()
    grad = exp / total
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
