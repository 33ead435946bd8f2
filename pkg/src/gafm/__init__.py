"""Gated-attention feature-fusion network for poverty prediction from imagery."""

from .tensor import (
    ConfigError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    precision,
    set_precision,
)
from .gradcheck import GradCheckReport, gradient_check

__version__ = "0.1.0"
