"""Minimal reverse-mode autodiff engine with the layers, losses and optimizer
used by the driving and hazard networks. 64-bit floats throughout."""

from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy_loss,
    dropout,
    l2_loss,
    lstm_cell,
    matmul,
    mul,
    narrow,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    tanh,
    tsum,
)
from .optim import ParameterStore, adam_step
from .nn import glorot_uniform, init_linear, init_lstm, linear, lstm_run
from .gradcheck import GradCheckReport, grad_check
from .checkpoint import CHECKPOINT_FORMAT, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "add", "concat", "cross_entropy_loss", "dropout", "l2_loss",
    "lstm_cell", "matmul", "mul", "narrow", "relu", "reshape", "scale",
    "sigmoid", "softmax", "tanh", "tsum",
    "ParameterStore", "adam_step",
    "glorot_uniform", "init_linear", "init_lstm", "linear", "lstm_run",
    "GradCheckReport", "grad_check",
    "CHECKPOINT_FORMAT", "load_checkpoint", "save_checkpoint",
]
