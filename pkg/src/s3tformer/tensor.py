"""Dense tensor kernels shared by every layer.

Real tensors are plain ``numpy`` arrays laid out as ``[T, B, C, N]``.  Spike
tensors are the same arrays restricted to the values 0 and 1; use
:func:`as_spikes` at trust boundaries to enforce that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

# Potential MACs issued by channel_project since import (reset with reset_op_counter).
_POTENTIAL_OPS = 0


def op_counter() -> int:
    return _POTENTIAL_OPS


def reset_op_counter() -> None:
    global _POTENTIAL_OPS
    _POTENTIAL_OPS = 0


def is_binary(x: np.ndarray) -> bool:
    x = np.asarray(x)
    return bool(np.all((x == 0) | (x == 1)))


def as_spikes(x, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Return ``x`` as a spike tensor, rejecting anything outside {0, 1}."""
    arr = np.asarray(x, dtype=dtype)
    if not is_binary(arr):
        bad = np.argwhere((arr != 0) & (arr != 1))[0]
        raise ValueError(
            f"spike tensor must be binary; found {arr[tuple(bad)]!r} at index {tuple(int(i) for i in bad)}"
        )
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")


def sigmoid(x):
    # tanh form avoids overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


# --------------------------------------------------------------------------- #
# pointwise channel projection (kernel-size-1 convolution)


def channel_project(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[t,b,o,n] = sum_c W[o,c] * x[t,b,c,n] + b[o]``."""
    global _POTENTIAL_OPS
    if x.ndim != 4:
        raise ValueError(f"x must be [T,B,C,N], got shape {x.shape}")
    if W.ndim != 2 or W.shape[1] != x.shape[2]:
        raise ValueError(
            f"dimension mismatch: W axis 1 (Cin={W.shape[-1]}) vs x axis 2 (C={x.shape[2]})"
        )
    if b.shape != (W.shape[0],):
        raise ValueError(f"dimension mismatch: b axis 0 ({b.shape}) vs W axis 0 (Cout={W.shape[0]})")
    T, B, Cin, N = x.shape
    _POTENTIAL_OPS += T * B * W.shape[0] * Cin * N
    return np.matmul(W, x) + b[:, None]


def channel_project_backward(x: np.ndarray, W: np.ndarray, grad_out: np.ndarray):
    """Gradients of :func:`channel_project` w.r.t. ``(x, W, b)``."""
    gx = np.matmul(W.T, grad_out)
    gW = np.einsum("tbon,tbcn->oc", grad_out, x, optimize=True)
    gb = grad_out.sum(axis=(0, 1, 3))
    return gx, gW, gb


# --------------------------------------------------------------------------- #
# batch normalization over the channel axis, statistics pooled over T, B, N


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("batch norm eps must be >= 0")
        if not 0 < self.momentum < 1:
            raise ValueError("batch norm momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, dtype=DEFAULT_DTYPE, **kw) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BNCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    train: bool


def _bcast(v: np.ndarray) -> np.ndarray:
    return v[None, None, :, None]


def batch_norm(x: np.ndarray, p: BatchNormParams, mode: str = "infer", cache: list | None = None) -> np.ndarray:
    """Channel-wise batch norm for ``[T,B,C,N]`` inputs.

    In ``"train"`` mode batch statistics are used and the running statistics
    are updated in place.  When ``cache`` is a list, the backward cache is
    appended to it.
    """
    if x.shape[2] != p.channels:
        raise ValueError(f"channel mismatch: x has {x.shape[2]} channels, params have {p.channels}")
    if mode == "train":
        mean = x.mean(axis=(0, 1, 3), dtype=np.float64)
        var = x.var(axis=(0, 1, 3), dtype=np.float64)
        count = x.size // x.shape[2]
        unbiased = var * count / max(count - 1, 1)
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean
        p.running_var[...] = (1 - m) * p.running_var + m * unbiased
    elif mode == "infer":
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    if np.any(var + p.eps <= 0):
        raise ValueError("zero variance with eps=0: batch norm undefined, use eps > 0")
    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    x_hat = (x - _bcast(mean.astype(x.dtype))) * _bcast(inv_std)
    if cache is not None:
        cache.append(BNCache(x_hat, inv_std, mode == "train"))
    return _bcast(p.gamma) * x_hat + _bcast(p.beta)


def batch_norm_backward(grad_out: np.ndarray, gamma: np.ndarray, cache: BNCache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    axes = (0, 1, 3)
    g_beta = grad_out.sum(axis=axes)
    g_gamma = (grad_out * cache.x_hat).sum(axis=axes)
    g_xhat = grad_out * _bcast(gamma)
    if not cache.train:
        return g_xhat * _bcast(cache.inv_std), g_gamma, g_beta
    m = grad_out.size // grad_out.shape[2]
    gx = (
        _bcast(cache.inv_std / m)
        * (m * g_xhat - _bcast(g_xhat.sum(axis=axes)) - cache.x_hat * _bcast((g_xhat * cache.x_hat).sum(axis=axes)))
    )
    return gx, g_gamma, g_beta


def fold_batchnorm(W: np.ndarray, b: np.ndarray, p: BatchNormParams):
    """Fold inference-mode batch norm into the preceding projection."""
    if W.shape[0] != p.channels or b.shape[0] != p.channels:
        raise ValueError(f"channel mismatch: projection has {W.shape[0]} outputs, params have {p.channels}")
    if np.any(p.running_var + p.eps <= 0):
        raise ValueError("zero running variance with eps=0 cannot be folded")
    scale = p.gamma.astype(np.float64) / np.sqrt(p.running_var.astype(np.float64) + p.eps)
    W2 = W.astype(np.float64) * scale[:, None]
    b2 = (b.astype(np.float64) - p.running_mean) * scale + p.beta
    return W2.astype(W.dtype), b2.astype(b.dtype)


# --------------------------------------------------------------------------- #


def softmax_rows(M: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    M = np.asarray(M)
    z = M - M.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return p * (grad_out - (grad_out * p).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------- #
# parameter storage and the projection layer (pointwise conv + BN)


@dataclass
class ParamStore:
    """Flat name -> array maps for parameters, gradients and non-learned buffers."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self.buffers[name] = value
        return value

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}


class Projection:
    """Pointwise channel projection followed by batch normalization."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.name = name
        self.store = store
        bound = 1.0 / np.sqrt(c_in)
        self.W = store.add(f"{name}.weight", rng.uniform(-bound, bound, (c_out, c_in)).astype(dtype))
        self.b = store.add(f"{name}.bias", rng.uniform(-bound, bound, c_out).astype(dtype))
        self.gamma = store.add(f"{name}.bn.gamma", np.ones(c_out, dtype))
        self.beta = store.add(f"{name}.bn.beta", np.zeros(c_out, dtype))
        self.running_mean = store.add_buffer(f"{name}.bn.running_mean", np.zeros(c_out, dtype))
        self.running_var = store.add_buffer(f"{name}.bn.running_var", np.ones(c_out, dtype))
        self._cache = None

    @property
    def c_in(self) -> int:
        return self.W.shape[1]

    @property
    def c_out(self) -> int:
        return self.W.shape[0]

    def bn_params(self) -> BatchNormParams:
        return BatchNormParams(self.gamma, self.beta, self.running_mean, self.running_var)

    def forward(self, x: np.ndarray, mode: str = "train", folded: bool = False) -> np.ndarray:
        if folded:
            W, b = fold_batchnorm(self.W, self.b, self.bn_params())
            self._cache = None
            return channel_project(x, W, b)
        z = channel_project(x, self.W, self.b)
        bn_cache: list = []
        y = batch_norm(z, self.bn_params(), mode, cache=bn_cache)
        self._cache = (x, bn_cache[0])
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x, bn_cache = self._cache
        gz, g_gamma, g_beta = batch_norm_backward(grad_out, self.gamma, bn_cache)
        gx, gW, gb = channel_project_backward(x, self.W, gz)
        g = self.store.grads
        g[f"{self.name}.weight"] += gW
        g[f"{self.name}.bias"] += gb
        g[f"{self.name}.bn.gamma"] += g_gamma
        g[f"{self.name}.bn.beta"] += g_beta
        return gx
