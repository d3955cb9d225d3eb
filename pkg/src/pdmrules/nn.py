"""Differentiable building blocks for the convolutional autoencoder.

Everything is plain float64 numpy with hand-written reverse-mode gradients:
each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients during ``backward``. Batched inputs have
shape (batch, channels, length).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError


class Parameter:
    """A trainable array paired with its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _same_padding(kernel_size: int, dilation: int) -> int:
    return (kernel_size - 1) // 2 * dilation


def _tap_columns(padded: np.ndarray, kernel_size: int, dilation: int, length: int) -> np.ndarray:
    # (..., C, Lp) -> (..., C, k, L): tap j of output t reads input t + j*dilation - pad
    taps = np.arange(length)[None, :] + dilation * np.arange(kernel_size)[:, None]
    return padded[..., taps]


def conv1d_batch(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, dilation: int) -> np.ndarray:
    """Same-padded dilated cross-correlation: (B, Cin, L) -> (B, Cout, L)."""
    if x.ndim != 3:
        raise ShapeError(f"expected (batch, channels, length) input, got shape {x.shape}")
    c_out, c_in, k = kernels.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    length = x.shape[2]
    pad = _same_padding(k, dilation)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    cols = _tap_columns(padded, k, dilation, length)
    return np.einsum("oik,bikl->bol", kernels, cols, optimize=True) + bias[None, :, None]


def conv1d_batch_backward(dout, x, kernels, dilation):
    """Gradients of :func:`conv1d_batch` w.r.t. input, kernels and bias."""
    _, _, k = kernels.shape
    length = x.shape[2]
    pad = _same_padding(k, dilation)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    cols = _tap_columns(padded, k, dilation, length)
    d_kernels = np.einsum("bol,bikl->oik", dout, cols, optimize=True)
    d_bias = dout.sum(axis=(0, 2))
    # dx is a correlation of dout with tap-flipped, channel-transposed kernels
    flipped = np.ascontiguousarray(kernels[:, :, ::-1].transpose(1, 0, 2))
    dx = conv1d_batch(dout, flipped, np.zeros(kernels.shape[1]), dilation)
    return dx, d_kernels, d_bias


def conv1d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Single-window convenience wrapper: (Cin, L) -> (Cout, L)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected (channels, length) input, got shape {x.shape}")
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    return conv1d_batch(x[None], kernels, bias, dilation)[0]


class Conv1d:
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int, rng):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {kernel_size}")
        if dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {dilation}")
        limit = 1.0 / math.sqrt(in_channels * kernel_size)
        self.weight = Parameter(
            "weight", rng.uniform(-limit, limit, (out_channels, in_channels, kernel_size))
        )
        self.bias = Parameter("bias", rng.uniform(-limit, limit, out_channels))
        self.dilation = dilation
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return conv1d_batch(x, self.weight.value, self.bias.value, self.dilation)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dw, db = conv1d_batch_backward(dout, self._x, self.weight.value, self.dilation)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def parameters(self):
        return [self.weight, self.bias]


class ChannelResample:
    """Fully connected map across channels, applied independently per time step."""

    def __init__(self, in_channels: int, out_channels: int, rng):
        limit = 1.0 / math.sqrt(in_channels)
        self.weight = Parameter("weight", rng.uniform(-limit, limit, (out_channels, in_channels)))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.weight.value.shape[1]:
            raise ShapeError(
                f"resample expects {self.weight.value.shape[1]} channels, got {x.shape[1]}"
            )
        self._x = x
        return np.einsum("oi,bil->bol", self.weight.value, x, optimize=True)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.weight.grad += np.einsum("bol,bil->oi", dout, self._x, optimize=True)
        return np.einsum("oi,bol->bil", self.weight.value, dout, optimize=True)

    def parameters(self):
        return [self.weight]


class BatchNorm1d:
    """Per-channel batch normalization over the (batch, length) axes.

    Training uses batch statistics (population variance) and updates running
    stats with momentum 0.1; evaluation uses the running stats.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.scale = Parameter("scale", np.ones(channels))
        self.shift = Parameter("shift", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.shape[1] != self.scale.value.shape[0]:
            raise ShapeError(
                f"batch norm over {self.scale.value.shape[0]} channels got {x.shape[1]}"
            )
        if train:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean[None, :, None]) * inv_std[None, :, None]
        if train:
            self._cache = (x_hat, inv_std)
        else:
            self._cache = None
        return self.scale.value[None, :, None] * x_hat + self.shift.value[None, :, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("batch-norm backward requires a preceding train-mode forward")
        x_hat, inv_std = self._cache
        self.scale.grad += (dout * x_hat).sum(axis=(0, 2))
        self.shift.grad += dout.sum(axis=(0, 2))
        d_hat = dout * self.scale.value[None, :, None]
        mean_d = d_hat.mean(axis=(0, 2), keepdims=True)
        mean_dx = (d_hat * x_hat).mean(axis=(0, 2), keepdims=True)
        return inv_std[None, :, None] * (d_hat - mean_d - x_hat * mean_dx)

    def parameters(self):
        return [self.scale, self.shift]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, np.asarray(value, dtype=np.float64))


class ReLU:
    def __init__(self):
        self._positive = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._positive = x > 0
        return np.where(self._positive, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._positive, dout, 0.0)


class Dropout:
    """Inverted-scaling dropout; identity in eval mode."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x: np.ndarray, train: bool, rng) -> np.ndarray:
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an explicit rng")
        self._mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dout
        return dout * self._mask


def adam_update(value, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; returns (value, m, v)."""
    if step < 1:
        raise ConfigError(f"Adam step index must be >= 1, got {step}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return value, m, v


class Adam:
    def __init__(self, parameters, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.parameters = list(parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._moments = [
            (np.zeros_like(p.value), np.zeros_like(p.value)) for p in self.parameters
        ]

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        for i, p in enumerate(self.parameters):
            m, v = self._moments[i]
            new_value, m, v = adam_update(
                p.value, p.grad, m, v, self.step_count, self.lr, self.beta1, self.beta2, self.eps
            )
            p.value[...] = new_value
            self._moments[i] = (m, v)
