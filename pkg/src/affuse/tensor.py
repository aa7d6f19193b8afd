"""Dense NCHW kernels (forward only).

Every function here takes and returns plain ``numpy.ndarray`` objects laid
out as ``(N, C, H, W)``. Gradients live in :mod:`affuse.autodiff`, which
wraps these kernels and adds the matching backward rules.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "DimensionError",
    "InputError",
    "ConfigError",
    "set_precision",
    "get_precision",
    "get_dtype",
    "as_tensor",
    "ConvParams",
    "BatchNormState",
    "conv2d",
    "batch_norm",
    "activation",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "broadcast_add",
    "elementwise_mul",
    "concat_channels",
    "nearest_upsample2x",
    "fully_connected",
    "softmax_cross_entropy",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InputError(ValueError):
    """Input values are out of the accepted domain."""


class ConfigError(ValueError):
    """Invalid construction or run configuration."""


_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_precision = "f64"


def set_precision(mode: str) -> None:
    """Set the engine-wide floating point mode (``"f64"`` or ``"f32"``)."""
    global _precision
    if mode not in _PRECISIONS:
        raise ConfigError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _precision = mode


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _PRECISIONS[_precision]


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a contiguous rank-4 array in the engine dtype."""
    arr = np.ascontiguousarray(x, dtype=get_dtype())
    if arr.ndim != 4:
        raise DimensionError(f"{name} must be rank-4 NCHW, got shape {arr.shape}")
    return arr


@dataclass
class ConvParams:
    """Convolution weights and geometry.

    ``kernel`` has shape ``(C_out, C_in, k, k)``.
    """

    kernel: np.ndarray
    stride: int = 1
    padding: int = 0
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ConfigError(f"kernel must be (C_out, C_in, k, k), got {self.kernel.shape}")
        if self.kernel.shape[2] not in (1, 3, 5):
            raise ConfigError(f"kernel size must be 1, 3 or 5, got {self.kernel.shape[2]}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError(f"bad stride/padding: {self.stride}/{self.padding}")

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def k(self) -> int:
        return self.kernel.shape[2]


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, **kw) -> "BatchNormState":
        dt = get_dtype()
        return cls(
            gamma=np.ones(channels, dt),
            beta=np.zeros(channels, dt),
            running_mean=np.zeros(channels, dt),
            running_var=np.ones(channels, dt),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d_shape(x_shape, c_out: int, k: int, stride: int, padding: int):
    n, _, h, w = x_shape
    return (n, c_out, _out_size(h, k, stride, padding), _out_size(w, k, stride, padding))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_raw(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0,
               bias: Optional[np.ndarray] = None) -> np.ndarray:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 operands, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    c_out, _, k, _ = kernel.shape
    n, c_in, h, w = x.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}")
    xp = _pad(x, padding)
    # Shift-and-accumulate over kernel taps; each tap is one GEMM over channels.
    acc = None
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            term = np.tensordot(kernel[:, :, i, j], patch, axes=([1], [1]))
            acc = term if acc is None else acc + term
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlate ``x`` with ``p.kernel``.

    >>> conv2d(np.full((1, 1, 1, 1), 2.0), ConvParams(np.full((1, 1, 1, 1), 3.0), bias=np.ones(1)))[0, 0, 0, 0]
    7.0
    """
    return conv2d_raw(x, p.kernel, p.stride, p.padding, p.bias)


def batch_norm_raw(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   running_mean: np.ndarray, running_var: np.ndarray, eps: float,
                   momentum: float, train: bool):
    """Batch norm forward.

    Returns ``(out, x_hat, inv_std)``. In train mode the running statistics
    arrays are updated in place.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(
            f"batch_norm channel mismatch: input {x.shape} vs {gamma.shape[0]} channels")
    shape = (1, -1, 1, 1)
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise InputError(f"train-mode batch_norm needs N*H*W >= 2, got input {x.shape}")
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (count / (count - 1))
    else:
        centered = x - running_mean.reshape(shape)
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std.reshape(shape)
    out = x_hat * gamma.reshape(shape) + beta.reshape(shape)
    return out, x_hat, inv_std


def batch_norm(x: np.ndarray, s: BatchNormState) -> np.ndarray:
    out, _, _ = batch_norm_raw(x, s.gamma, s.beta, s.running_mean, s.running_var,
                               s.eps, s.momentum, s.mode == "train")
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow for large ``|x|``.

    The result is kept strictly inside (0, 1): where rounding would give
    exactly 0 or 1 (``|x|`` beyond roughly 36 in double precision) it is
    clamped to the nearest representable interior value.
    """
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def _check_broadcast(x: np.ndarray, y: np.ndarray, op: str) -> None:
    if x.ndim != 4 or y.ndim != 4 or x.shape[:2] != y.shape[:2]:
        raise DimensionError(f"{op}: incompatible shapes {x.shape} and {y.shape}")
    if y.shape[2:] != (1, 1) and y.shape[2:] != x.shape[2:]:
        raise DimensionError(f"{op}: incompatible shapes {x.shape} and {y.shape}")


def broadcast_add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_broadcast(x, y, "broadcast_add")
    return x + y


def elementwise_mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_broadcast(x, y, "elementwise_mul")
    return x * y


def concat_channels(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or y.ndim != 4 or x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise DimensionError(f"concat_channels: incompatible shapes {x.shape} and {y.shape}")
    return np.concatenate([x, y], axis=1)


def nearest_upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def fully_connected(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply ``w`` (shape ``C_out x C_in``) to an ``N x C x 1 x 1`` tensor."""
    if x.ndim != 4 or x.shape[2:] != (1, 1):
        raise DimensionError(f"fully_connected expects N x C x 1 x 1 input, got {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"fully_connected: weight {w.shape} does not match input {x.shape}")
    out = x[:, :, 0, 0] @ w.T
    if bias is not None:
        out = out + bias
    return out[:, :, None, None]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the channel axis (axis 1)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        if logits.shape[2:] == (1, 1) and labels.shape == (logits.shape[0],):
            labels = labels.reshape(-1, 1, 1)
        else:
            raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of the true class.

    ``logits`` is ``N x K x 1 x 1`` (classification) or ``N x K x H x W``
    (per-pixel); ``labels`` is ``(N,)`` or ``(N, H, W)`` respectively.
    """
    if logits.ndim != 4:
        raise DimensionError(f"logits must be rank-4, got {logits.shape}")
    labels = _check_labels(logits, labels)
    if labels.ndim == 1:
        labels = labels.reshape(-1, 1, 1)
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    return float(-picked.mean())
