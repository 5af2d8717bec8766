"""Split-learning laboratory: protocol simulation plus the two attacks an
honest-but-curious server can mount from its own side of the wire."""

from . import attacks, autograd, data, harness, models, optim, protocol, transport, wire
from .autograd import Tensor

__version__ = "0.1.0"

__all__ = [
    "attacks",
    "autograd",
    "data",
    "harness",
    "models",
    "optim",
    "protocol",
    "transport",
    "wire",
    "Tensor",
]
