"""Small numerical substrate: valid convolution, activations, dropout, RMSProp,
seeded randomness and a finite-difference gradient checker.

Tensors are plain numpy arrays. Layers operate on batches laid out as
``(batch, channels, height, width)``; the functional ``conv2d`` also accepts a
single ``(channels, height, width)`` image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """All randomness in the package goes through a PCG64 generator."""
    return np.random.Generator(np.random.PCG64(seed))


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _patches(x, fh, fw, sh, sw):
    # (B, C, Ho, Wo, fh, fw) strided view, no copy
    win = sliding_window_view(x, (fh, fw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def conv2d_forward(x, w, b, stride):
    """Batched valid convolution. x: (B,C,H,W), w: (Co,C,fh,fw), b: (Co,)."""
    if x.ndim != 4:
        raise DimensionError(f"expected a 4-d batch, got shape {x.shape}")
    co, ci, fh, fw = w.shape
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise DimensionError(f"strides must be >= 1, got {stride}")
    if x.shape[1] != ci:
        raise DimensionError(f"channel axis: input has {x.shape[1]}, filters expect {ci}")
    if x.shape[2] < fh or x.shape[3] < fw:
        raise DimensionError(
            f"spatial axes: input {x.shape[2]}x{x.shape[3]} smaller than filter {fh}x{fw}")
    p = _patches(x, fh, fw, sh, sw)
    y = np.tensordot(p, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, Co)
    y = y.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(x, w, stride, dy):
    """Returns (dx, dw, db) for ``conv2d_forward``."""
    co, ci, fh, fw = w.shape
    sh, sw = stride
    ho, wo = dy.shape[2], dy.shape[3]
    p = _patches(x, fh, fw, sh, sw)
    dw = np.tensordot(dy, p, axes=([0, 2, 3], [0, 2, 3]))  # (Co, C, fh, fw)
    db = dy.sum(axis=(0, 2, 3))
    dp = np.tensordot(dy, w, axes=([1], [0]))  # (B, Ho, Wo, C, fh, fw)
    dx = np.zeros_like(x)
    for a in range(fh):
        for c in range(fw):
            dx[:, :, a:a + sh * (ho - 1) + 1:sh, c:c + sw * (wo - 1) + 1:sw] += \
                dp[:, :, :, :, a, c].transpose(0, 3, 1, 2)
    return dx, dw, db


def conv2d(x, filters, bias, stride=(1, 1)):
    """Valid (unpadded) strided convolution of a ``(C,H,W)`` or batched input."""
    single = x.ndim == 3
    if single:
        x = x[None]
    y = conv2d_forward(x, filters, bias, stride)
    return y[0] if single else y


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns (output, mask); mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


@dataclass
class RMSProp:
    """RMSProp with one squared-gradient accumulator per named parameter.

    acc <- rho*acc + (1-rho)*g**2;  p <- p - lr*g/sqrt(acc+eps)
    """

    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    acc: dict = field(default_factory=dict)

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        if param.shape != grad.shape:
            raise DimensionError(f"{name}: param {param.shape} vs grad {grad.shape}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        acc = self.acc.get(name)
        if acc is None:
            acc = np.zeros_like(param)
            self.acc[name] = acc
        acc *= self.rho
        acc += (1.0 - self.rho) * grad * grad
        param -= self.lr * grad / np.sqrt(acc + self.eps)

    def update(self, params: dict, grads: dict) -> None:
        for name, p in params.items():
            self.step(name, p, grads[name])


def rmsprop_step(param, grad, acc, lr=1e-3, rho=0.9, eps=1e-8):
    """Functional single step; returns new (param, acc) without mutating inputs."""
    if param.shape != grad.shape or acc.shape != param.shape:
        raise DimensionError(f"shapes differ: {param.shape}, {grad.shape}, {acc.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    acc = rho * acc + (1.0 - rho) * grad * grad
    return param - lr * grad / np.sqrt(acc + eps), acc


def grad_check(f: Callable[[], float], params: np.ndarray | Sequence[np.ndarray],
               analytic: np.ndarray | Sequence[np.ndarray], delta: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` is evaluated with no arguments after perturbing ``params`` in place,
    so it must read the arrays it depends on. ``max_coords`` limits how many
    coordinates per array are probed (chosen with ``rng``).
    """
    if isinstance(params, np.ndarray):
        params, analytic = [params], [analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs gradient {g.shape}")
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError("parameters must be contiguous to perturb in place")
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or make_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + delta
            fp = f()
            flat[i] = orig - delta
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"function not finite near coordinate {i}")
            num = (fp - fm) / (2 * delta)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    return worst


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Conv2D:
    """Valid strided convolution layer with optional tanh and dropout."""

    def __init__(self, name, c_in, c_out, kernel, stride, activation="tanh",
                 dropout=0.0, rng=None, dtype=np.float32):
        self.name = name
        self.stride = tuple(stride)
        self.kernel = tuple(kernel)
        self.activation = activation
        self.dropout = dropout
        fh, fw = self.kernel
        rng = rng or make_rng(0)
        self.params = {
            f"{name}.w": glorot_uniform(rng, (c_out, c_in, fh, fw),
                                        c_in * fh * fw, c_out * fh * fw, dtype),
            f"{name}.b": np.zeros(c_out, dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.c_in, self.c_out = c_in, c_out

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())

    def out_shape(self, h, w):
        return (self.c_out, conv_output_size(h, self.kernel[0], self.stride[0]),
                conv_output_size(w, self.kernel[1], self.stride[1]))

    def forward(self, x, training=False, rng=None):
        w, b = self.params[f"{self.name}.w"], self.params[f"{self.name}.b"]
        y = conv2d_forward(x, w, b, self.stride)
        if self.activation == "tanh":
            y = np.tanh(y)
        out, mask = dropout(y, self.dropout, rng, training)
        self._cache = (x, y, mask)
        return out

    def backward(self, dout):
        x, y, mask = self._cache
        if mask is not None:
            dout = dout * mask
        if self.activation == "tanh":
            dout = dout * (1.0 - y * y)
        dx, dw, db = conv2d_backward(x, self.params[f"{self.name}.w"], self.stride, dout)
        self.grads[f"{self.name}.w"] += dw
        self.grads[f"{self.name}.b"] += db
        return dx
