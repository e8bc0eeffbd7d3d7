"""Minimal float64 tensor library with reverse-mode autodiff."""
from omrlane.autodiff.conv import (
    RunningStats,
    batchnorm,
    batchnorm_relu,
    bilinear_resize,
    conv2d,
    deform_conv,
)
from omrlane.autodiff.params import ParamStore
from omrlane.autodiff.tensor import (
    Tensor,
    absolute,
    as_tensor,
    clip,
    concat,
    concat_channels,
    exp,
    log,
    matmul,
    maximum,
    minimum,
    no_grad,
    record_branches,
    relu,
    reshape,
    sigmoid,
    take_flat,
    tanh,
    transpose,
)

__all__ = [
    "ParamStore", "RunningStats", "Tensor", "absolute", "as_tensor", "batchnorm", "batchnorm_relu",
    "bilinear_resize", "clip", "concat", "concat_channels", "conv2d", "deform_conv", "exp", "log",
    "matmul", "maximum", "minimum", "no_grad", "record_branches", "relu", "reshape", "sigmoid",
    "take_flat", "tanh", "transpose",
]
