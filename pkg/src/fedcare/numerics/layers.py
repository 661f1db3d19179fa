"""Layer kinds for small sequential networks.

Every layer works on float64 arrays whose leading axis is the batch.  A
layer is bound to a per-sample input shape when the network is built, so
shape errors surface at construction time rather than mid-training.

Forward passes are row-independent: each sample's output is computed by
its own BLAS call (stacked ``np.matmul``), so the bits of a sample do not
depend on what else shares the batch.  Batch-norm is the one deliberate
exception.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ConfigError

NORM_EPS = 1e-5
BN_MOMENTUM = 0.9

KINDS = (
    "affine", "conv2d", "relu", "tanh", "sigmoid", "group-norm", "batch-norm",
    "nearest-upsample", "flatten", "reshape", "crop-pad",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    groups: int = 0
    channels: int = 0
    factor: int = 0
    shape: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def to_dict(self):
        defaults = LayerSpec("relu")
        out = {"kind": self.kind}
        for key, value in asdict(self).items():
            if key != "kind" and value != getattr(defaults, key):
                out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad layer spec {d}: {exc}") from None


def affine(in_dim, out_dim):
    return LayerSpec("affine", in_dim=in_dim, out_dim=out_dim)


def conv2d(in_channels, out_channels, kernel=3):
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels, kernel=kernel)


def group_norm(channels, groups):
    return LayerSpec("group-norm", channels=channels, groups=groups)


def batch_norm(channels):
    return LayerSpec("batch-norm", channels=channels)


def upsample(factor=2):
    return LayerSpec("nearest-upsample", factor=factor)


def reshape(*shape):
    return LayerSpec("reshape", shape=shape)


def crop_pad(height, width):
    return LayerSpec("crop-pad", shape=(height, width))


def activation(kind):
    return LayerSpec(kind)


def flatten():
    return LayerSpec("flatten")


class Layer:
    """A LayerSpec bound to its per-sample input shape."""

    has_buffers = False

    def __init__(self, spec: LayerSpec, in_shape: tuple, index: int):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.index = index
        self.out_shape = self._infer()

    def fail(self, msg):
        raise ConfigError(f"layer {self.index} ({self.spec.kind}): {msg}")

    def _infer(self):
        return self.in_shape

    def param_shapes(self):
        return []

    def init_params(self, rng):
        return {}

    def forward(self, p, x, train=False, buffers=None):
        raise NotImplementedError

    def backward(self, p, cache, dy):
        raise NotImplementedError

    def flops(self):
        """(forward, backward) FLOPs per sample."""
        n = prod(self.out_shape)
        return n, n


class Affine(Layer):
    def _infer(self):
        s = self.spec
        if s.in_dim <= 0 or s.out_dim <= 0:
            self.fail("in_dim and out_dim must be positive")
        if self.in_shape != (s.in_dim,):
            self.fail(f"expects input ({s.in_dim},), got {self.in_shape}")
        return (s.out_dim,)

    def param_shapes(self):
        return [("W", (self.spec.out_dim, self.spec.in_dim)), ("b", (self.spec.out_dim,))]

    def init_params(self, rng):
        bound = np.sqrt(6.0 / (self.spec.in_dim + self.spec.out_dim))
        return {"W": rng.uniform(-bound, bound, (self.spec.out_dim, self.spec.in_dim)),
                "b": np.zeros(self.spec.out_dim)}

    def forward(self, p, x, train=False, buffers=None):
        y = np.matmul(x[:, None, :], p["W"].T)[:, 0, :] + p["b"]
        return y, x, None

    def backward(self, p, x, dy):
        return dy @ p["W"], {"W": dy.T @ x, "b": dy.sum(axis=0)}

    def flops(self):
        f = 2 * self.spec.in_dim * self.spec.out_dim
        return f, 2 * f


class Conv2d(Layer):
    """Stride 1, zero 'same' padding, odd square kernel."""

    def _infer(self):
        s = self.spec
        if s.kernel <= 0 or s.kernel % 2 == 0:
            self.fail("kernel must be a positive odd number for 'same' padding")
        if len(self.in_shape) != 3 or self.in_shape[0] != s.in_channels:
            self.fail(f"expects ({s.in_channels}, H, W), got {self.in_shape}")
        if s.out_channels <= 0:
            self.fail("out_channels must be positive")
        return (s.out_channels,) + self.in_shape[1:]

    def param_shapes(self):
        s = self.spec
        return [("W", (s.out_channels, s.in_channels, s.kernel, s.kernel)), ("b", (s.out_channels,))]

    def init_params(self, rng):
        s = self.spec
        fan_in = s.in_channels * s.kernel ** 2
        bound = np.sqrt(6.0 / fan_in)
        return {"W": rng.uniform(-bound, bound, (s.out_channels, s.in_channels, s.kernel, s.kernel)),
                "b": np.zeros(s.out_channels)}

    def _cols(self, x):
        k = self.spec.kernel
        pad = k // 2
        B, C, H, W = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,H,W,k,k
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, H * W, C * k * k)

    def forward(self, p, x, train=False, buffers=None):
        B, _, H, W = x.shape
        cols = self._cols(x)
        wm = p["W"].reshape(self.spec.out_channels, -1)
        y = np.matmul(cols, wm.T)
        y = y.transpose(0, 2, 1).reshape(B, -1, H, W) + p["b"][:, None, None]
        return y, cols, None

    def backward(self, p, cols, dy):
        s = self.spec
        k, pad = s.kernel, s.kernel // 2
        B, O, H, W = dy.shape
        C = s.in_channels
        dY = dy.reshape(B, O, H * W).transpose(0, 2, 1)
        wm = p["W"].reshape(O, -1)
        dw = dY.reshape(-1, O).T @ cols.reshape(-1, cols.shape[-1])
        dcols = np.matmul(dY, wm).reshape(B, H, W, C, k, k)
        dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + H, pad:pad + W]
        return dx, {"W": dw.reshape(p["W"].shape), "b": dy.sum(axis=(0, 2, 3))}

    def flops(self):
        s = self.spec
        f = 2 * s.kernel ** 2 * s.in_channels * s.out_channels * prod(self.in_shape[1:])
        return f, 2 * f


class ReLU(Layer):
    def forward(self, p, x, train=False, buffers=None):
        mask = x > 0
        return x * mask, mask, None

    def backward(self, p, mask, dy):
        return dy * mask, {}


class Tanh(Layer):
    def forward(self, p, x, train=False, buffers=None):
        y = np.tanh(x)
        return y, y, None

    def backward(self, p, y, dy):
        return dy * (1.0 - y * y), {}


class Sigmoid(Layer):
    def forward(self, p, x, train=False, buffers=None):
        y = expit(x)
        return y, y, None

    def backward(self, p, y, dy):
        return dy * y * (1.0 - y), {}


def _channel_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _normalize_backward(dxhat, xhat, inv, axes, n):
    sum_d = dxhat.sum(axis=axes, keepdims=True)
    sum_dx = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return inv / n * (n * dxhat - sum_d - xhat * sum_dx)


def group_norm_forward(h, groups, gamma=None, beta=None, eps=NORM_EPS):
    """Group normalization of ``h`` (batch, channels, *spatial).

    Returns ``(y, xhat, inv_std)``; ``xhat`` is the pre-affine output.
    """
    B, C = h.shape[:2]
    if groups <= 0 or C % groups:
        raise ConfigError(f"group-norm: {C} channels not divisible into {groups} groups")
    hr = h.reshape(B, groups, -1)
    mean = hr.mean(axis=-1, keepdims=True)
    var = hr.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (hr - mean) * inv
    y = xhat.reshape(h.shape)
    if gamma is not None:
        y = y * _channel_view(gamma, h.ndim) + _channel_view(beta, h.ndim)
    return y, xhat, inv


class GroupNorm(Layer):
    def _infer(self):
        s = self.spec
        if len(self.in_shape) < 1 or self.in_shape[0] != s.channels:
            self.fail(f"expects {s.channels} channels, got input {self.in_shape}")
        if s.groups <= 0 or s.channels % s.groups:
            self.fail(f"{s.channels} channels not divisible into {s.groups} groups")
        return self.in_shape

    def param_shapes(self):
        c = self.spec.channels
        return [("gamma", (c,)), ("beta", (c,))]

    def init_params(self, rng):
        c = self.spec.channels
        return {"gamma": np.ones(c), "beta": np.zeros(c)}

    def forward(self, p, x, train=False, buffers=None):
        y, xhat, inv = group_norm_forward(x, self.spec.groups, p["gamma"], p["beta"])
        return y, (xhat, inv, x.shape), None

    def backward(self, p, cache, dy):
        xhat, inv, shape = cache
        B = shape[0]
        g = self.spec.groups
        axes = (0,) + tuple(range(2, len(shape)))
        xhat_full = xhat.reshape(shape)
        grads = {"gamma": (dy * xhat_full).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dxhat = (dy * _channel_view(p["gamma"], len(shape))).reshape(B, g, -1)
        dx = _normalize_backward(dxhat, xhat, inv, -1, xhat.shape[-1])
        return dx.reshape(shape), grads


class BatchNorm(Layer):
    """Batch statistics in training, running averages otherwise."""

    has_buffers = True

    def _infer(self):
        if len(self.in_shape) < 1 or self.in_shape[0] != self.spec.channels:
            self.fail(f"expects {self.spec.channels} channels, got input {self.in_shape}")
        return self.in_shape

    def param_shapes(self):
        c = self.spec.channels
        return [("gamma", (c,)), ("beta", (c,))]

    def init_params(self, rng):
        c = self.spec.channels
        return {"gamma": np.ones(c), "beta": np.zeros(c)}

    def init_buffers(self):
        c = self.spec.channels
        return np.zeros(c), np.ones(c)

    def forward(self, p, x, train=False, buffers=None):
        nd = x.ndim
        axes = (0,) + tuple(range(2, nd))
        new = None
        if train:
            mean = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
            if buffers is not None:
                rm, rv = buffers
                new = (BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mean.ravel(),
                       BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * var.ravel())
        else:
            rm, rv = buffers if buffers is not None else self.init_buffers()
            mean, var = _channel_view(rm, nd), _channel_view(rv, nd)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mean) * inv
        y = xhat * _channel_view(p["gamma"], nd) + _channel_view(p["beta"], nd)
        return y, (xhat, inv, train), new

    def backward(self, p, cache, dy):
        xhat, inv, train = cache
        axes = (0,) + tuple(range(2, dy.ndim))
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dxhat = dy * _channel_view(p["gamma"], dy.ndim)
        if not train:
            return dxhat * inv, grads
        n = dy.size // dy.shape[1]
        return _normalize_backward(dxhat, xhat, inv, axes, n), grads


class Upsample(Layer):
    """Nearest-neighbour: each cell becomes a factor x factor block."""

    def _infer(self):
        f = self.spec.factor
        if f <= 0:
            self.fail("factor must be positive")
        if len(self.in_shape) != 3:
            self.fail(f"expects (C, H, W), got {self.in_shape}")
        c, h, w = self.in_shape
        return (c, h * f, w * f)

    def forward(self, p, x, train=False, buffers=None):
        f = self.spec.factor
        return x.repeat(f, axis=2).repeat(f, axis=3), None, None

    def backward(self, p, cache, dy):
        f = self.spec.factor
        B, C, H, W = dy.shape
        return dy.reshape(B, C, H // f, f, W // f, f).sum(axis=(3, 5)), {}

    def flops(self):
        return 0, prod(self.out_shape)


class Flatten(Layer):
    def _infer(self):
        return (prod(self.in_shape),)

    def forward(self, p, x, train=False, buffers=None):
        return x.reshape(x.shape[0], -1), None, None

    def backward(self, p, cache, dy):
        return dy.reshape((dy.shape[0],) + self.in_shape), {}

    def flops(self):
        return 0, 0


class Reshape(Flatten):
    def _infer(self):
        if prod(self.spec.shape) != prod(self.in_shape) or not self.spec.shape:
            self.fail(f"cannot reshape {self.in_shape} to {self.spec.shape}")
        return self.spec.shape

    def forward(self, p, x, train=False, buffers=None):
        return x.reshape((x.shape[0],) + self.spec.shape), None, None


class CropPad(Layer):
    """Centre crop or zero pad the two spatial axes to ``shape``."""

    def _infer(self):
        if len(self.in_shape) != 3 or len(self.spec.shape) != 2:
            self.fail("crop-pad needs (C, H, W) input and a 2-d target shape")
        return (self.in_shape[0],) + self.spec.shape

    def _windows(self):
        src, dst = [], []
        for n_in, n_out in zip(self.in_shape[1:], self.spec.shape):
            if n_in >= n_out:
                a = (n_in - n_out) // 2
                src.append(slice(a, a + n_out))
                dst.append(slice(0, n_out))
            else:
                a = (n_out - n_in) // 2
                src.append(slice(0, n_in))
                dst.append(slice(a, a + n_in))
        return src, dst

    def forward(self, p, x, train=False, buffers=None):
        src, dst = self._windows()
        y = np.zeros((x.shape[0],) + self.out_shape)
        y[:, :, dst[0], dst[1]] = x[:, :, src[0], src[1]]
        return y, None, None

    def backward(self, p, cache, dy):
        src, dst = self._windows()
        dx = np.zeros((dy.shape[0],) + self.in_shape)
        dx[:, :, src[0], src[1]] = dy[:, :, dst[0], dst[1]]
        return dx, {}

    def flops(self):
        return 0, 0


_LAYER_TYPES = {
    "affine": Affine, "conv2d": Conv2d, "relu": ReLU, "tanh": Tanh, "sigmoid": Sigmoid,
    "group-norm": GroupNorm, "batch-norm": BatchNorm, "nearest-upsample": Upsample,
    "flatten": Flatten, "reshape": Reshape, "crop-pad": CropPad,
}


def bind(spec: LayerSpec, in_shape, index) -> Layer:
    return _LAYER_TYPES[spec.kind](spec, in_shape, index)
