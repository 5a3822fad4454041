from . import ops
from .core import (DimensionError, NumericError, Parameter, Value, backward, default_dtype,
                   grad_enabled, no_grad, precision)
from .optim import RMSProp

__all__ = [
    "ops", "Value", "Parameter", "backward", "no_grad", "precision", "default_dtype",
    "grad_enabled", "DimensionError", "NumericError", "RMSProp",
]
