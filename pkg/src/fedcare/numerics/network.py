"""Flat parameter vectors and sequential networks with reverse-mode gradients."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from math import prod
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from ..errors import ConfigError, UsageError
from .layers import Layer, LayerSpec, bind


class Slot(NamedTuple):
    layer: int
    name: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return prod(self.shape)


@dataclass(frozen=True)
class ParamLayout:
    slots: tuple

    @property
    def size(self):
        if not self.slots:
            return 0
        last = self.slots[-1]
        return last.offset + last.size

    def layer_offset(self, layer):
        """Offset of the first parameter at or after ``layer``."""
        for s in self.slots:
            if s.layer >= layer:
                return s.offset
        return self.size


class ParamVector:
    """Read-only flat float64 vector plus the layout that gives it meaning.

    Supports ``+``, ``-``, unary ``-``, scalar ``*`` and ``dot``; operands must
    share a layout.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: ParamLayout):
        values = np.array(values, dtype=np.float64, copy=True).ravel()
        if values.size != layout.size:
            raise UsageError(f"{values.size} values for a layout of size {layout.size}")
        values.flags.writeable = False
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout):
        return cls(np.zeros(layout.size), layout)

    def __len__(self):
        return self.values.size

    def _check(self, other):
        if not isinstance(other, ParamVector) or other.layout != self.layout:
            raise UsageError("parameter layouts differ")

    def __add__(self, other):
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other):
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __neg__(self):
        return ParamVector(-self.values, self.layout)

    def __mul__(self, scalar):
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def dot(self, other):
        self._check(other)
        return float(self.values @ other.values)

    def norm(self):
        return float(np.linalg.norm(self.values))

    def with_values(self, values):
        return ParamVector(values, self.layout)

    def unflatten(self):
        """Per-layer dicts of named array views into ``values``."""
        out = {}
        for s in self.layout.slots:
            out.setdefault(s.layer, {})[s.name] = self.values[s.offset:s.offset + s.size].reshape(s.shape)
        return out

    @classmethod
    def flatten(cls, per_layer: dict, layout: ParamLayout):
        flat = np.empty(layout.size)
        for s in layout.slots:
            arr = np.asarray(per_layer[s.layer][s.name], dtype=np.float64)
            if arr.shape != s.shape:
                raise UsageError(f"layer {s.layer} {s.name}: shape {arr.shape} != {s.shape}")
            flat[s.offset:s.offset + s.size] = arr.ravel()
        return cls(flat, layout)

    def __eq__(self, other):
        return (isinstance(other, ParamVector) and other.layout == self.layout
                and np.array_equal(other.values, self.values))

    def __hash__(self):
        return hash((self.layout, self.values.tobytes()))

    def __repr__(self):
        return f"ParamVector(size={len(self)})"


def bind_layers(specs: Sequence[LayerSpec], input_shape) -> list[Layer]:
    layers, shape = [], tuple(input_shape)
    for i, spec in enumerate(specs):
        layer = bind(spec, shape, i)
        layers.append(layer)
        shape = layer.out_shape
    return layers


def make_layout(layers) -> ParamLayout:
    slots, off = [], 0
    for layer in layers:
        for name, shape in layer.param_shapes():
            slots.append(Slot(layer.index, name, off, tuple(shape)))
            off += prod(shape)
    return ParamLayout(tuple(slots))


class Network:
    """Immutable sequential network: layer specs + parameters (+ norm buffers)."""

    def __init__(self, specs, input_shape, params: ParamVector, buffers=None):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = bind_layers(self.specs, self.input_shape)
        layout = make_layout(self.layers)
        if params.layout != layout:
            raise ConfigError("parameter layout does not match the architecture")
        self.params = params
        if buffers is None:
            buffers = {l.index: l.init_buffers() for l in self.layers if l.has_buffers}
        self.buffers = buffers

    @classmethod
    def build(cls, specs, input_shape, seed=0, **kw):
        layers = bind_layers(specs, input_shape)
        rng = np.random.default_rng(seed)
        per_layer = {l.index: l.init_params(rng) for l in layers}
        return cls(specs, input_shape, ParamVector.flatten(per_layer, make_layout(layers)), **kw)

    @property
    def layout(self):
        return self.params.layout

    @property
    def output_shape(self):
        return self.layers[-1].out_shape

    def replace(self, params=None, buffers=None):
        return self._rebuild(params if params is not None else self.params,
                             buffers if buffers is not None else self.buffers)

    def _rebuild(self, params, buffers):
        return Network(self.specs, self.input_shape, params, buffers)

    def architecture(self):
        return {"input_shape": list(self.input_shape), "layers": [s.to_dict() for s in self.specs]}

    def digest(self):
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def flops_per_sample(self, from_layer=0):
        """(forward FLOPs over all layers, backward FLOPs over layers >= from_layer)."""
        fwd = sum(l.flops()[0] for l in self.layers)
        bwd = sum(l.flops()[1] for l in self.layers[from_layer:])
        return fwd, bwd


class SplitModel(Network):
    """Classifier whose layers ``[split_index:]`` form the head, the rest the backbone."""

    def __init__(self, specs, input_shape, params, split_index, buffers=None):
        super().__init__(specs, input_shape, params, buffers)
        if not 0 < split_index < len(self.specs):
            raise ConfigError(f"split_index {split_index} outside (0, {len(self.specs)})")
        self.split_index = int(split_index)

    @classmethod
    def build(cls, specs, input_shape, split_index, seed=0):
        net = Network.build(specs, input_shape, seed)
        return cls(specs, input_shape, net.params, split_index)

    def _rebuild(self, params, buffers):
        return SplitModel(self.specs, self.input_shape, params, self.split_index, buffers)

    def architecture(self):
        return dict(super().architecture(), split_index=self.split_index)

    @property
    def head_offset(self):
        return self.layout.layer_offset(self.split_index)

    def backbone(self, params=None):
        p = self.params if params is None else params
        return p.values[:self.head_offset]

    def head(self, params=None):
        p = self.params if params is None else params
        return p.values[self.head_offset:]

    def with_head(self, head):
        values = np.concatenate([self.backbone(), np.asarray(head, dtype=np.float64)])
        return self.replace(params=self.params.with_values(values))


class Cache(NamedTuple):
    params: ParamVector
    layer_caches: list
    batch_shape: tuple
    buffers: dict


def forward(model: Network, batch, train=False):
    """Run the network; returns ``(output, cache)``.

    With ``train=True`` batch-norm layers use batch statistics and the
    cache carries their updated running averages in ``cache.buffers``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 1 or x.shape[1:] != model.input_shape:
        raise ConfigError(f"layer 0: batch shape {x.shape} does not match input {model.input_shape}")
    per_layer = model.params.unflatten()
    caches, new_buffers = [], dict(model.buffers)
    for layer in model.layers:
        x, c, buf = layer.forward(per_layer.get(layer.index, {}), x, train, model.buffers.get(layer.index))
        caches.append(c)
        if buf is not None:
            new_buffers[layer.index] = buf
    return x, Cache(model.params, caches, np.shape(batch), new_buffers)


def backward(model: Network, cache: Cache, loss_grad, from_layer=0):
    """Reverse pass.  Returns ``(param_grad, input_grad)``.

    Layers before ``from_layer`` are skipped: their parameter gradients are
    zero and ``input_grad`` is the gradient at the input of ``from_layer``.
    """
    if cache.params is not model.params:
        raise UsageError("stale cache: parameters changed since forward")
    per_layer = model.params.unflatten()
    grads = {}
    dy = np.asarray(loss_grad, dtype=np.float64)
    for layer in reversed(model.layers[from_layer:]):
        dy, g = layer.backward(per_layer.get(layer.index, {}), cache.layer_caches[layer.index], dy)
        if g:
            grads[layer.index] = g
    flat = np.zeros(model.layout.size)
    for s in model.layout.slots:
        if s.layer in grads:
            flat[s.offset:s.offset + s.size] = grads[s.layer][s.name].ravel()
    return ParamVector(flat, model.layout), dy


def sgd_step(params: ParamVector, grad: ParamVector, lr, sign="descent"):
    if grad.layout != params.layout:
        raise UsageError("parameter layouts differ")
    if sign == "descent":
        return params.with_values(params.values - lr * grad.values)
    if sign == "ascent":
        return params.with_values(params.values + lr * grad.values)
    raise UsageError(f"sign must be 'descent' or 'ascent', not {sign!r}")


def per_sample_cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    return logsumexp(logits, axis=1) - logits[np.arange(len(labels)), labels]


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient wrt the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    lse = logsumexp(logits, axis=1, keepdims=True)
    loss = float(np.mean(lse[:, 0] - logits[np.arange(n), labels]))
    grad = np.exp(logits - lse)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def loss_and_grad(model: Network, x, y, from_layer=0):
    """Mean cross-entropy of ``model`` on ``(x, y)`` and its parameter gradient."""
    logits, cache = forward(model, x)
    loss, dlogits = cross_entropy(logits, y)
    grad, _ = backward(model, cache, dlogits, from_layer=from_layer)
    return loss, grad


def predict(model: Network, x, batch_size=1024):
    out = [forward(model, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0,) + model.output_shape)
