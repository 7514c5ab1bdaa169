"""Numeric core: float64 tensors, reverse-mode tape, gradient checking, Adam, tensor files."""

from . import ops
from .gradcheck import finite_diff_check
from .io import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .optim import Adam
from .tensor import Tape, Tensor, as_tensor, backward, current_tape, fresh_tape, no_grad

__all__ = [
    "Adam", "Tape", "Tensor", "as_tensor", "backward", "current_tape", "finite_diff_check",
    "fresh_tape", "load_tensor", "no_grad", "ops", "save_tensor", "tensor_from_bytes", "tensor_to_bytes",
]
