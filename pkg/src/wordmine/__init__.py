"""Few-shot word-image pair mining, attention scoring and evaluation."""

from .errors import (
    ClassMismatch,
    ConfigError,
    DimensionMismatch,
    EmptyInput,
    InsufficientPool,
    MalformedQueryBank,
    MissingGold,
    ZeroVector,
)
from .kernels import BACKEND

__version__ = "0.1.0"
