from protoguard.tensor import functional, ops
from protoguard.tensor.tensor import (
    Function,
    Tape,
    Tensor,
    as_tensor,
    default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    tensor,
)

__all__ = [
    "Function",
    "Tape",
    "Tensor",
    "as_tensor",
    "default_dtype",
    "functional",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "precision",
    "tensor",
]
