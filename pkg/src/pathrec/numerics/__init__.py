"""Minimal dense numeric kernels with reverse-mode gradients."""

from .functional import (
    CrossEntropyResult,
    GradCheckReport,
    cross_entropy,
    grad_check,
    js_divergence,
    kl_divergence,
    softmax,
)
from .optim import Adam, ParamStore, SGD
from .rng import named_stream
from .tensor import (
    Tensor,
    add_const,
    as_tensor,
    concat,
    gather_last,
    log_softmax_t,
    minimum,
    no_grad,
    softmax_t,
    stack,
    stop_gradient,
    take_rows,
)

__all__ = [
    "Adam",
    "CrossEntropyResult",
    "GradCheckReport",
    "ParamStore",
    "SGD",
    "Tensor",
    "add_const",
    "as_tensor",
    "concat",
    "cross_entropy",
    "gather_last",
    "grad_check",
    "js_divergence",
    "kl_divergence",
    "log_softmax_t",
    "minimum",
    "named_stream",
    "no_grad",
    "softmax",
    "softmax_t",
    "stack",
    "stop_gradient",
    "take_rows",
]
