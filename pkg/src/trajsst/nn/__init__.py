"""Minimal differentiable kernel: tensors, fused ops, modules, Adam, grad checks."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .module import LayerNorm, Linear, Module, Parameter
from .optim import Adam
from .tensor import Tensor, no_grad

__all__ = [
    "Adam",
    "GradCheckError",
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "functional",
    "grad_check",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
]
