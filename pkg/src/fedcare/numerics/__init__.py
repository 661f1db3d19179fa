from .layers import (
    LayerSpec, activation, affine, batch_norm, conv2d, crop_pad, flatten, group_norm,
    group_norm_forward, reshape, upsample,
)
from .network import (
    Network, ParamLayout, ParamVector, Slot, SplitModel, backward, cross_entropy, forward,
    loss_and_grad, per_sample_cross_entropy, predict, sgd_step,
)

__all__ = [
    "LayerSpec", "Network", "ParamLayout", "ParamVector", "Slot", "SplitModel", "activation", "affine",
    "backward", "batch_norm", "conv2d", "crop_pad", "cross_entropy", "flatten", "forward",
    "group_norm", "group_norm_forward", "loss_and_grad", "per_sample_cross_entropy", "predict",
    "reshape", "sgd_step", "upsample",
]
