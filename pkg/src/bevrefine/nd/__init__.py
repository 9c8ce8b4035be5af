"""Minimal dense-array numerics with a reverse-mode tape, tuned to this model."""
from .tensor import (
    FLOAT_DTYPES,
    NumericFault,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    dtype_scope,
    set_default_dtype,
    set_finite_checks,
)
from .ops import (
    add,
    concat,
    layernorm,
    matmul,
    mean,
    mul,
    pow_const,
    relu,
    reshape,
    scale,
    segment_sum,
    sigmoid,
    slice_,
    softmax,
    softplus,
    sub,
    sum_,
    take_rows,
    tanh,
    transpose,
    weighted_sum,
)
from .conv import batchnorm_eval, batchnorm_train, conv2d, upsample_bilinear
from .sample import attn_sample, bilinear_sample, sample_maps
from .optim import ParamStore, adamw_step
from . import checkpoint

__all__ = [
    "FLOAT_DTYPES",
    "NumericFault",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "current_tape",
    "default_dtype",
    "dtype_scope",
    "set_default_dtype",
    "set_finite_checks",
    "add",
    "concat",
    "layernorm",
    "matmul",
    "mean",
    "mul",
    "pow_const",
    "relu",
    "reshape",
    "scale",
    "segment_sum",
    "sigmoid",
    "slice_",
    "softmax",
    "softplus",
    "sub",
    "sum_",
    "take_rows",
    "tanh",
    "transpose",
    "weighted_sum",
    "batchnorm_eval",
    "batchnorm_train",
    "conv2d",
    "upsample_bilinear",
    "attn_sample",
    "bilinear_sample",
    "sample_maps",
    "ParamStore",
    "adamw_step",
    "checkpoint",
]
