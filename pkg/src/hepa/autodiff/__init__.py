"""Reverse-mode automatic differentiation over numpy arrays."""
from . import ops
from .engine import (Tensor, as_tensor, backward, clear_tape, grad_enabled, no_grad,
                     tape_length)
from .module import LayerNorm, Linear, Module, Parameter
from .optim import AdamW, adamw_step

__all__ = ["Tensor", "as_tensor", "backward", "clear_tape", "grad_enabled", "no_grad",
           "tape_length", "ops", "Module", "Parameter", "Linear", "LayerNorm", "AdamW",
           "adamw_step"]
