from .tensor import Tensor, ShapeError, backward, no_grad
from .params import ParamSet, ROLE_WEIGHT, ROLE_BIAS, ROLE_BN_STAT, save_checkpoint, load_checkpoint
from . import functional
from .gradcheck import grad_check

__all__ = [
    "Tensor",
    "ShapeError",
    "backward",
    "no_grad",
    "ParamSet",
    "ROLE_WEIGHT",
    "ROLE_BIAS",
    "ROLE_BN_STAT",
    "save_checkpoint",
    "load_checkpoint",
    "functional",
    "grad_check",
]
