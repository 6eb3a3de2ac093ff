# This file makes the autograd directory a Python package
from .tensor import (
    Function,
    Parameter,
    Tape,
    Tensor,
    add,
    backward,
    concat_channels,
    crop_spatial,
    current_tape,
    double_precision,
    get_default_dtype,
    mul,
    no_grad,
    slice_channels,
    sum_all,
    tensor_new,
)
from .gradcheck import grad_check
from .functional import (
    IGNORE_ID,
    BatchNormState,
    ConvSpec,
    batch_norm,
    bilinear_upsample,
    conv2d,
    global_avg_pool,
    max_pool2d,
    relu,
    softmax_cross_entropy,
)

__all__ = [
    'Function', 'Parameter', 'Tape', 'Tensor', 'add', 'backward', 'concat_channels',
    'crop_spatial', 'current_tape', 'double_precision', 'get_default_dtype', 'mul',
    'no_grad', 'slice_channels', 'sum_all', 'tensor_new', 'grad_check', 'IGNORE_ID',
    'BatchNormState', 'ConvSpec', 'batch_norm', 'bilinear_upsample', 'conv2d',
    'global_avg_pool', 'max_pool2d', 'relu', 'softmax_cross_entropy',
]
