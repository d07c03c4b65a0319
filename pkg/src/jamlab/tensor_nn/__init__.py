"""Minimal dense-tensor autodiff core with AdamW and scheduling."""
from .gradcheck import GradReport, check_inputs, grad_check
from .nn import Conv1d, Conv2d, Linear, Module, Parameter, record, recording
from .optim import TrainConfig, adamw_step, early_stopper, lr_at
from .tensor import GraphError, NumericError, Tensor, strict_mode

__all__ = [
    "Conv1d",
    "Conv2d",
    "GradReport",
    "GraphError",
    "Linear",
    "Module",
    "NumericError",
    "Parameter",
    "Tensor",
    "TrainConfig",
    "adamw_step",
    "check_inputs",
    "early_stopper",
    "grad_check",
    "lr_at",
    "record",
    "recording",
    "strict_mode",
]
