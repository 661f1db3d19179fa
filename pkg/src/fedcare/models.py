"""Architecture builders for the classifiers used in experiments."""
from __future__ import annotations

from math import prod

from .errors import ConfigError
from .numerics import LayerSpec, SplitModel, activation, affine, conv2d, flatten


def cnn_specs(input_shape, class_count, conv_channels=(8, 8), hidden=32, kernel=3, act="relu"):
    """``len(conv_channels)`` conv layers, one hidden affine layer, then the head.

    Returns ``(specs, split_index)``; the head is the final affine layer.
    """
    c, h, w = input_shape
    specs = []
    for out in conv_channels:
        specs += [conv2d(c, out, kernel), activation(act)]
        c = out
    specs += [flatten(), affine(c * h * w, hidden), activation(act), affine(hidden, class_count)]
    return specs, len(specs) - 1


def mlp_specs(input_shape, class_count, hidden=(32,), act="relu"):
    specs, width = [flatten()], prod(input_shape)
    for hdim in hidden:
        specs += [affine(width, hdim), activation(act)]
        width = hdim
    specs.append(affine(width, class_count))
    return specs, len(specs) - 1


def build_classifier(arch: dict, input_shape, class_count, seed=0) -> SplitModel:
    """Build from an architecture dict.

    ``{"kind": "cnn", "conv_channels": [...], "hidden": n}`` or
    ``{"kind": "mlp", "hidden": [...]}`` or an explicit
    ``{"kind": "layers", "layers": [...], "split_index": k}``.  The first two
    accept ``"activation"`` (``relu`` by default, or ``tanh``/``sigmoid``).
    """
    kind = arch.get("kind", "cnn")
    act = arch.get("activation", "relu")
    if kind == "cnn":
        specs, split = cnn_specs(input_shape, class_count, tuple(arch.get("conv_channels", (8, 8))),
                                 int(arch.get("hidden", 32)), int(arch.get("kernel", 3)), act)
    elif kind == "mlp":
        specs, split = mlp_specs(input_shape, class_count, tuple(arch.get("hidden", (32,))), act)
    elif kind == "layers":
        specs = [LayerSpec.from_dict(d) for d in arch["layers"]]
        split = int(arch["split_index"])
    else:
        raise ConfigError(f"unknown classifier kind {kind!r}")
    return SplitModel.build(specs, input_shape, split, seed=seed)
