from .tensor import (
    Tensor,
    ShapeError,
    no_grad,
    grad_enabled,
    set_default_dtype,
    default_dtype,
    using_dtype,
)
from .gradcheck import grad_check
from . import tensor
from . import layers
from . import checkpoint

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
    "grad_check",
    "tensor",
    "layers",
    "checkpoint",
]
