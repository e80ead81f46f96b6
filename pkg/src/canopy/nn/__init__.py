from .autograd import Tensor, no_grad, as_tensor
from .layers import Module, Parameter, Linear, BatchNorm
from .optim import AdamW, cosine_warm_restart_lr
from . import functional

__all__ = ["Tensor", "no_grad", "as_tensor", "Module", "Parameter", "Linear", "BatchNorm",
           "AdamW", "cosine_warm_restart_lr", "functional"]
