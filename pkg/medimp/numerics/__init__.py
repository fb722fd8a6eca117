from medimp.numerics.gradcheck import checkable_parameters, grad_check, relative_error
from medimp.numerics.nn import (
    AttentionParams,
    activation,
    conv3d,
    embedding,
    layer_norm,
    linear,
    log_softmax,
    multi_head_attention,
    softmax,
    softmax_rows,
)
from medimp.numerics.tensor import Function, Parameter, Tape, Tensor, backward, concat, take

__all__ = [
    "AttentionParams",
    "Function",
    "Parameter",
    "Tape",
    "Tensor",
    "activation",
    "backward",
    "checkable_parameters",
    "concat",
    "conv3d",
    "embedding",
    "grad_check",
    "layer_norm",
    "linear",
    "log_softmax",
    "multi_head_attention",
    "relative_error",
    "softmax",
    "softmax_rows",
    "take",
]
