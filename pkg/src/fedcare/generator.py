"""Data-free class-conditional pseudo-sample generator.

The generator is a small decoder: a linear projection of ``[z, onehot(y)]``
to a low-resolution feature map, ``K`` blocks of
upsample -> conv -> norm -> ReLU, a 3x3 conv to image channels, and a
bounded output activation.  It is fitted by inverting a frozen classifier:
cross-entropy towards the conditioning label plus total-variation and
diversity penalties.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, DomainError
from .numerics import (
    Network, ParamVector, activation, affine, backward, batch_norm, conv2d, crop_pad,
    cross_entropy, forward, group_norm, reshape, upsample,
)

ETA_RANGE = (1e-3, 1e-1)


@dataclass(frozen=True)
class GenLossConfig:
    lambda_tv: float | None = None  # None: set adaptively at step 0
    lambda_div: float = 0.5
    eta_atten: float = 0.01
    eps_div: float = 1e-4
    steps: int = 300
    batch_size: int = 32
    latent_dim: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    norm_kind: str = "group-norm"
    groups: int = 4
    h0_channels: int = 16
    block_channels: tuple = (16, 8)
    out_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(self.block_channels))
        if self.lambda_div <= 0:
            raise ConfigError("lambda_div must be positive")
        if not ETA_RANGE[0] <= self.eta_atten <= ETA_RANGE[1]:
            raise ConfigError(f"eta_atten must lie in {ETA_RANGE}")
        if self.norm_kind not in ("group-norm", "batch-norm"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.out_activation not in ("sigmoid", "tanh"):
            raise ConfigError("out_activation must be 'sigmoid' or 'tanh'")
        if self.steps < 0 or self.batch_size <= 0 or self.latent_dim <= 0 or not self.block_channels:
            raise ConfigError("generator sizes must be positive")


def generator_specs(image_shape, class_count, config: GenLossConfig):
    c_img, h, w = image_shape
    k = len(config.block_channels)
    s0 = max(1, ceil(max(h, w) / 2 ** k))
    c = config.h0_channels
    specs = [affine(config.latent_dim + class_count, c * s0 * s0), reshape(c, s0, s0)]
    for out in config.block_channels:
        if config.norm_kind == "group-norm":
            g = config.groups
            if out % g:
                raise ConfigError(f"block width {out} not divisible into {g} groups")
            norm = group_norm(out, g)
        else:
            norm = batch_norm(out)
        specs += [upsample(2), conv2d(c, out, 3), norm, activation("relu")]
        c = out
    specs.append(conv2d(c, c_img, 3))
    if (s0 * 2 ** k, s0 * 2 ** k) != (h, w):
        specs.append(crop_pad(h, w))
    specs.append(activation(config.out_activation))
    return specs


class GeneratorNet(NamedTuple):
    net: Network
    latent_dim: int
    class_count: int
    out_activation: str

    @classmethod
    def build(cls, image_shape, class_count, config: GenLossConfig, seed=0):
        specs = generator_specs(image_shape, class_count, config)
        net = Network.build(specs, (config.latent_dim + class_count,), seed=seed)
        return cls(net, config.latent_dim, class_count, config.out_activation)

    @property
    def output_range(self):
        return (0.0, 1.0) if self.out_activation == "sigmoid" else (-1.0, 1.0)

    def inputs(self, z, labels):
        onehot = np.zeros((len(labels), self.class_count))
        onehot[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
        return np.concatenate([np.asarray(z, dtype=np.float64), onehot], axis=1)

    def generate(self, z, labels, train=False):
        return forward(self.net, self.inputs(z, labels), train=train)[0]

    def meta(self):
        return {"latent_dim": self.latent_dim, "class_count": self.class_count,
                "out_activation": self.out_activation}


class PseudoSampleBatch(NamedTuple):
    samples: np.ndarray
    labels: np.ndarray


def tv_loss(x):
    """Anisotropic total variation summed over batch and channels."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.abs(np.diff(x, axis=-2)).sum() + np.abs(np.diff(x, axis=-1)).sum())


def tv_loss_grad(x):
    dv = np.sign(np.diff(x, axis=-2))
    dh = np.sign(np.diff(x, axis=-1))
    g = np.zeros_like(x)
    g[..., 1:, :] += dv
    g[..., :-1, :] -= dv
    g[..., :, 1:] += dh
    g[..., :, :-1] -= dh
    return tv_loss(x), g


def _latent_distance(z1, z2):
    dz = float(np.abs(np.asarray(z1) - np.asarray(z2)).sum())
    if dz == 0.0:
        raise DomainError("diversity loss undefined for identical latent codes")
    return dz


def div_loss(x1, x2, z1, z2, eps_div):
    """Inverse of (output L1 distance / latent L1 distance + eps)."""
    dz = _latent_distance(z1, z2)
    ratio = float(np.abs(np.asarray(x1) - np.asarray(x2)).sum()) / dz
    return 1.0 / (ratio + eps_div)


def div_loss_grad(x1, x2, z1, z2, eps_div):
    """Returns ``(loss, d/dx1, d/dx2)``."""
    dz = _latent_distance(z1, z2)
    diff = np.asarray(x1) - np.asarray(x2)
    ratio = float(np.abs(diff).sum()) / dz
    loss = 1.0 / (ratio + eps_div)
    g1 = -(loss ** 2) * np.sign(diff) / dz
    return loss, g1, -g1


def init_lambda_tv(ce0, tv0, eta_atten):
    """Smoothness weight that puts the TV term on the CE term's scale at step 0."""
    if tv0 == 0:
        return float(eta_atten)
    return float(eta_atten * ce0 / tv0)


class LossParts(NamedTuple):
    total: float
    ce: float
    tv: float
    div: float


def total_loss(classifier: Network, gen: GeneratorNet, z, labels, lambda_tv, lambda_div,
               pair=None, eps_div=1e-4, train=True):
    """Inversion objective and its gradient wrt generator parameters.

    ``pair = (z1, z2, y)`` supplies the diversity pair; it is generated in
    the same forward batch as the main samples but only enters the
    diversity term.  The classifier only receives input gradients.
    Returns ``(LossParts, ParamVector gradient, updated norm buffers)``.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = len(labels)
    rows, row_labels = [z], [labels]
    use_div = pair is not None and lambda_div != 0
    if use_div:
        z1, z2, yp = pair
        rows.append(np.stack([z1, z2]))
        row_labels.append(np.array([yp, yp]))
    x_all, gcache = forward(gen.net, gen.inputs(np.concatenate(rows), np.concatenate(row_labels)), train=train)
    x = x_all[:b]

    logits, ccache = forward(classifier, x)
    ce, dlogits = cross_entropy(logits, labels)
    _, dx = backward(classifier, ccache, dlogits)

    tv, dtv = tv_loss_grad(x)
    dx_all = np.zeros_like(x_all)
    dx_all[:b] = dx + lambda_tv * dtv
    div = 0.0
    if use_div:
        div, g1, g2 = div_loss_grad(x_all[b], x_all[b + 1], z1, z2, eps_div)
        dx_all[b] = lambda_div * g1
        dx_all[b + 1] = lambda_div * g2
    grad, _ = backward(gen.net, gcache, dx_all)
    total = ce + lambda_tv * tv + lambda_div * div
    return LossParts(total, ce, tv, div), grad, gcache.buffers


@dataclass
class GeneratorHistory:
    lambda_tv: float = 0.0
    losses: list = field(default_factory=list)
    flops: int = 0


def train_generator(classifier: Network, config: GenLossConfig, permitted: Sequence[int], seed=0,
                    history: GeneratorHistory | None = None) -> GeneratorNet:
    """Fit a generator against the frozen ``classifier`` using SGD with momentum."""
    permitted = np.array(sorted(set(int(c) for c in permitted)), dtype=np.int64)
    if permitted.size == 0:
        raise ConfigError("no permitted classes for the generator")
    class_count = classifier.output_shape[0]
    gen = GeneratorNet.build(classifier.input_shape, class_count, config, seed=seed)
    rng = np.random.default_rng([seed, 7919])
    history = history if history is not None else GeneratorHistory()
    velocity = np.zeros(len(gen.net.params))
    lambda_tv = config.lambda_tv
    gfwd, gbwd = gen.net.flops_per_sample()
    cfwd, cbwd = classifier.flops_per_sample()
    for step in range(config.steps):
        labels = rng.choice(permitted, size=config.batch_size)
        z = rng.normal(size=(config.batch_size, config.latent_dim))
        pair = (rng.normal(size=config.latent_dim), rng.normal(size=config.latent_dim),
                int(rng.choice(permitted)))
        if lambda_tv is None:
            x0 = gen.generate(z, labels, train=True)
            ce0, _ = cross_entropy(forward(classifier, x0)[0], labels)
            lambda_tv = init_lambda_tv(ce0, tv_loss(x0), config.eta_atten)
        parts, grad, buffers = total_loss(classifier, gen, z, labels, lambda_tv, config.lambda_div,
                                          pair, config.eps_div)
        if not np.isfinite(parts.total) or not np.all(np.isfinite(grad.values)):
            raise DivergenceError(step, "generator loss became non-finite")
        velocity = config.momentum * velocity + grad.values
        params = gen.net.params.with_values(gen.net.params.values - config.lr * velocity)
        gen = gen._replace(net=gen.net.replace(params=params, buffers=buffers))
        history.losses.append(parts)
        n = config.batch_size + 2
        history.flops += n * (gfwd + gbwd) + config.batch_size * (cfwd + cbwd)
    history.lambda_tv = float(lambda_tv) if lambda_tv is not None else 0.0
    return gen


def sample(gen: GeneratorNet, per_class, permitted, seed=0) -> PseudoSampleBatch:
    labels = np.repeat(np.array(sorted(set(int(c) for c in permitted)), dtype=np.int64), per_class)
    z = np.random.default_rng([seed, 104729]).normal(size=(labels.size, gen.latent_dim))
    return PseudoSampleBatch(gen.generate(z, labels), labels)
