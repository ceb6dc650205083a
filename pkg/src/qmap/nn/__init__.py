from . import functional
from .modules import (
    Conv2d,
    GroupNorm,
    Linear,
    Module,
    RegressionNetConfig,
    RegressionNet,
    ResBlock,
    UNet,
    UNetConfig,
)
from .optim import Adam
from .tensor import Tensor, as_tensor, no_grad

__all__ = [
    "Adam",
    "Conv2d",
    "GroupNorm",
    "Linear",
    "Module",
    "RegressionNetConfig",
    "RegressionNet",
    "ResBlock",
    "Tensor",
    "UNet",
    "UNetConfig",
    "as_tensor",
    "functional",
    "no_grad",
]
