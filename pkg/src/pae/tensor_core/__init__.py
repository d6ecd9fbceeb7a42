"""Numerical substrate: tensors with a reverse-mode tape, gradient oracle,
eigensolver and the binary tensor file format."""

from .eig import eigenvalues, hessenberg, sort_spectrum
from .errors import ConfigError, ContractError, NumericError, PaeError, ShapeError
from .gradcheck import finite_diff_grad, rel_error
from .tensor import Tape, Tensor, active_tape, backward, frobenius_norm_sq, matmul

__all__ = [
    "ConfigError", "ContractError", "NumericError", "PaeError", "ShapeError",
    "Tape", "Tensor", "active_tape", "backward", "eigenvalues", "finite_diff_grad",
    "frobenius_norm_sq", "hessenberg", "matmul", "rel_error", "sort_spectrum",
]
