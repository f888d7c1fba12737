"""Convolution and normalization layers on :class:`~tumorseg.autodiff.Tensor`.

Layout is always ``[batch, channel, x, y, z]``. Convolutions go through
im2col/col2im from :mod:`tumorseg.kernels` and a single matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Function, Tensor, leaky_relu

__all__ = [
    "ConvParams", "NormParams", "conv3d", "transpose_conv3d", "group_norm",
    "batch_norm", "normalize", "conv_norm_act", "init_conv", "init_norm", "effective_groups",
]

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1
LRELU_SLOPE = 0.01


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or a triple, got {v!r}")
    return t


@dataclass
class ConvParams:
    """Weights ``[out_ch, in_ch, kx, ky, kz]`` and bias ``[out_ch]``.

    For :func:`transpose_conv3d` the same layout is read as the forward
    convolution it is the adjoint of, so the transposed layer maps
    ``out_ch`` channels back to ``in_ch`` channels.
    """

    weights: Tensor
    bias: Tensor | None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if any(s not in (1, 2) for s in self.stride):
            raise ValueError(f"stride must be 1 or 2 per axis, got {self.stride}")

    @property
    def kernel(self) -> tuple[int, int, int]:
        return tuple(self.weights.shape[2:])


@dataclass
class NormParams:
    kind: str
    gamma: Tensor
    beta: Tensor
    num_groups: int = 1
    eps: float = NORM_EPS
    momentum: float = BN_MOMENTUM
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    stats_initialized: bool = False

    def __post_init__(self):
        if self.kind not in ("batch", "group"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.eps <= 0:
            raise ValueError("epsilon must be positive")
        channels = self.gamma.shape[0]
        if self.kind == "group" and channels % self.num_groups:
            raise ValueError(f"{channels} channels are not divisible into {self.num_groups} groups")
        if self.kind == "batch" and self.running_mean is None:
            self.running_mean = np.zeros(channels, dtype=self.gamma.dtype)
            self.running_var = np.ones(channels, dtype=self.gamma.dtype)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def init_running_stats(self) -> None:
        """Mark running statistics (mean 0, variance 1 unless already set) as usable for inference."""
        self.stats_initialized = True


def effective_groups(channels: int, num_groups: int) -> int:
    """``num_groups`` capped at the channel count, so narrow layers fall back to per-channel groups."""
    g = min(num_groups, channels)
    if channels % g:
        raise ValueError(f"{channels} channels are not divisible into {g} groups")
    return g


# ---------------------------------------------------------------------------
# convolution


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


class Conv3d(Function):
    kind = "conv3d"

    def forward(self, x, w, b=None):
        stride, pad = self.attrs["stride"], self.attrs["padding"]
        if x.ndim != 5:
            raise ValueError(f"conv3d expects [b, c, x, y, z], got shape {x.shape}")
        if w.shape[1] != x.shape[1]:
            raise ValueError(f"channel mismatch: input has {x.shape[1]}, weights expect {w.shape[1]}")
        k = w.shape[2:]
        out_sp = tuple(_out_extent(n, kk, s, p) for n, kk, s, p in zip(x.shape[2:], k, stride, pad))
        if min(out_sp) < 1:
            raise ValueError(f"conv3d output would be empty for input {x.shape} and kernel {k}")
        xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else np.ascontiguousarray(x)
        cols = kernels.im2col3d(xp, k, stride)
        wm = w.reshape(w.shape[0], -1)
        out = np.matmul(wm, cols)
        if b is not None:
            out += b[None, :, None]
        self.cols, self.xp_shape, self.x_shape, self.w = cols, xp.shape, x.shape, w
        return out.reshape((x.shape[0], w.shape[0]) + out_sp)

    def backward(self, g):
        stride, pad = self.attrs["stride"], self.attrs["padding"]
        nb, nout = g.shape[:2]
        g2 = g.reshape(nb, nout, -1)
        wm = self.w.reshape(nout, -1)
        gx = gw = gb = None
        if self.needs[0]:
            dcols = np.matmul(wm.T, g2)
            dxp = kernels.col2im3d(dcols, self.xp_shape, self.w.shape[2:], stride)
            sl = (slice(None), slice(None)) + tuple(slice(p, n - p) for p, n in zip(pad, self.xp_shape[2:]))
            gx = np.ascontiguousarray(dxp[sl])
        if self.needs[1]:
            gw = np.matmul(g2, self.cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.w.shape)
        if len(self.needs) > 2 and self.needs[2]:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb


class TransposeConv3d(Function):
    kind = "transpose_conv3d"

    def forward(self, y, w, b=None):
        stride, pad = self.attrs["stride"], self.attrs["padding"]
        if y.ndim != 5:
            raise ValueError(f"transpose_conv3d expects [b, c, x, y, z], got shape {y.shape}")
        if w.shape[0] != y.shape[1]:
            raise ValueError(f"channel mismatch: input has {y.shape[1]}, weights expect {w.shape[0]}")
        if b is not None and b.shape[0] != w.shape[1]:
            raise ValueError(f"transpose_conv3d bias has {b.shape[0]} entries for {w.shape[1]} output channels")
        k = w.shape[2:]
        padded = tuple((n - 1) * s + kk for n, s, kk in zip(y.shape[2:], stride, k))
        out_sp = tuple(n - 2 * p for n, p in zip(padded, pad))
        if min(out_sp) < 1:
            raise ValueError(f"transpose_conv3d output would be empty for input {y.shape}")
        nb = y.shape[0]
        y2 = y.reshape(nb, y.shape[1], -1)
        wm = w.reshape(w.shape[0], -1)
        cols = np.matmul(wm.T, y2)
        outp = kernels.col2im3d(cols, (nb, w.shape[1]) + padded, k, stride)
        sl = (slice(None), slice(None)) + tuple(slice(p, n - p) for p, n in zip(pad, padded))
        out = np.ascontiguousarray(outp[sl])
        if b is not None:
            out += b[None, :, None, None, None]
        self.y2, self.w, self.y_shape = y2, w, y.shape
        return out

    def backward(self, g):
        stride, pad = self.attrs["stride"], self.attrs["padding"]
        gp = np.pad(g, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else np.ascontiguousarray(g)
        cols = kernels.im2col3d(gp, self.w.shape[2:], stride)
        wm = self.w.reshape(self.w.shape[0], -1)
        gy = gw = gb = None
        if self.needs[0]:
            gy = np.matmul(wm, cols).reshape(self.y_shape)
        if self.needs[1]:
            gw = np.matmul(self.y2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.w.shape)
        if len(self.needs) > 2 and self.needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gy, gw, gb


def conv3d(x: Tensor, params: ConvParams) -> Tensor:
    args = (x, params.weights) + ((params.bias,) if params.bias is not None else ())
    return Conv3d.apply(*args, stride=params.stride, padding=params.padding)


def transpose_conv3d(y: Tensor, params: ConvParams) -> Tensor:
    args = (y, params.weights) + ((params.bias,) if params.bias is not None else ())
    return TransposeConv3d.apply(*args, stride=params.stride, padding=params.padding)


# ---------------------------------------------------------------------------
# normalization


def _norm_backward(g_hat, xhat, inv_std, axis):
    """Gradient through ``xhat = (x - mean) / std`` with statistics over ``axis``."""
    m1 = g_hat.mean(axis=axis, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axis, keepdims=True)
    return inv_std * (g_hat - m1 - xhat * m2)


class GroupNorm(Function):
    kind = "group_norm"

    def forward(self, x, gamma, beta):
        groups, eps = self.attrs["num_groups"], self.attrs["eps"]
        nb, nc = x.shape[:2]
        if nc % groups:
            raise ValueError(f"{nc} channels are not divisible into {groups} groups")
        xr = x.reshape(nb, groups, -1)
        mu = xr.mean(axis=2, keepdims=True)
        var = ((xr - mu) ** 2).mean(axis=2, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = ((xr - mu) * inv_std).reshape(x.shape)
        bshape = (1, nc) + (1,) * (x.ndim - 2)
        self.xhat, self.inv_std, self.gamma, self.bshape = xhat, inv_std, gamma, bshape
        return xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def backward(self, g):
        groups = self.attrs["num_groups"]
        nb = g.shape[0]
        red = (0,) + tuple(range(2, g.ndim))
        gx = None
        if self.needs[0]:
            g_hat = (g * self.gamma.reshape(self.bshape)).reshape(nb, groups, -1)
            gx = _norm_backward(g_hat, self.xhat.reshape(nb, groups, -1), self.inv_std, 2).reshape(g.shape)
        return gx, (g * self.xhat).sum(axis=red), g.sum(axis=red)


class BatchNormTrain(Function):
    kind = "batch_norm"

    def forward(self, x, gamma, beta):
        eps = self.attrs["eps"]
        red = (0,) + tuple(range(2, x.ndim))
        mu = x.mean(axis=red, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=red, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = (x - mu) * inv_std
        bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
        self.batch_mean = mu.reshape(-1)
        self.batch_var = var.reshape(-1)
        self.count = x.size // x.shape[1]
        self.xhat, self.inv_std, self.gamma, self.bshape, self.red = xhat, inv_std, gamma, bshape, red
        return xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def backward(self, g):
        gx = None
        if self.needs[0]:
            g_hat = g * self.gamma.reshape(self.bshape)
            gx = _norm_backward(g_hat, self.xhat, self.inv_std, self.red)
        return gx, (g * self.xhat).sum(axis=self.red), g.sum(axis=self.red)


def group_norm(x: Tensor, params: NormParams) -> Tensor:
    if params.kind != "group":
        raise ValueError("group_norm needs group-kind NormParams")
    return GroupNorm.apply(x, params.gamma, params.beta, num_groups=params.num_groups, eps=params.eps)


def batch_norm(x: Tensor, params: NormParams, mode: str = "train") -> Tensor:
    """Per-channel normalization over (batch, x, y, z).

    Train mode normalizes with batch statistics and folds them into the running
    estimates (unbiased variance, momentum ``params.momentum``). Infer mode
    applies the running estimates and refuses to run before any train step
    unless :meth:`NormParams.init_running_stats` was called.
    """
    if params.kind != "batch":
        raise ValueError("batch_norm needs batch-kind NormParams")
    if mode == "train":
        if x.shape[0] < 1:
            raise ValueError("train mode needs a non-empty batch")
        out = BatchNormTrain.apply(x, params.gamma, params.beta, eps=params.eps)
        fn = out.node.fn if out.node is not None else None
        # recompute statistics when the graph is untracked
        if fn is None:
            red = (0,) + tuple(range(2, x.ndim))
            bm = x.data.mean(axis=red)
            bv = ((x.data - bm.reshape((1, -1) + (1,) * (x.ndim - 2))) ** 2).mean(axis=red)
            count = x.data.size // x.shape[1]
        else:
            bm, bv, count = fn.batch_mean, fn.batch_var, fn.count
        unbiased = bv * (count / max(count - 1, 1))
        m = params.momentum
        params.running_mean[...] = (1 - m) * params.running_mean + m * bm
        params.running_var[...] = (1 - m) * params.running_var + m * unbiased
        params.stats_initialized = True
        return out
    if mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    if not params.stats_initialized:
        raise RuntimeError("batch_norm inference requested before any running statistics exist")
    bshape = (1, params.channels) + (1,) * (x.ndim - 2)
    dt = x.dtype
    scale = (1.0 / np.sqrt(params.running_var.astype(dt) + dt.type(params.eps))).reshape(bshape)
    shift = params.running_mean.astype(dt).reshape(bshape)
    xhat = (x - Tensor(shift)) * Tensor(scale)
    return xhat * params.gamma.reshape(bshape) + params.beta.reshape(bshape)


def normalize(x: Tensor, params: NormParams, mode: str = "train") -> Tensor:
    if params.kind == "group":
        return group_norm(x, params)
    return batch_norm(x, params, mode)


def conv_norm_act(x: Tensor, conv: ConvParams, norm: NormParams, mode: str = "train",
                  slope: float = LRELU_SLOPE) -> Tensor:
    """conv -> norm -> leaky ReLU, the unit every resolution level is built from."""
    return leaky_relu(normalize(conv3d(x, conv), norm, mode), slope)


# ---------------------------------------------------------------------------
# initialisation


def init_conv(rng: np.random.Generator, out_ch: int, in_ch: int, kernel, dtype=np.float32,
              stride=1, padding=0, bias: bool = True, slope: float = LRELU_SLOPE) -> ConvParams:
    """Fan-in scaled uniform weights (He init for leaky ReLU), zero bias."""
    k = _triple(kernel)
    fan_in = in_ch * k[0] * k[1] * k[2]
    bound = np.sqrt(6.0 / ((1.0 + slope**2) * fan_in))
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch) + k).astype(dtype)
    b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(Tensor(w, requires_grad=True), b, stride, padding)


def init_norm(kind: str, channels: int, dtype=np.float32, num_groups: int = 32) -> NormParams:
    gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
    beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
    if kind == "group":
        return NormParams("group", gamma, beta, num_groups=effective_groups(channels, num_groups))
    return NormParams("batch", gamma, beta)
