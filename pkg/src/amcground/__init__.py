"""Grounding a micro vision-language model with attention-mask consistency."""
from .errors import (
    AMCError,
    GraphError,
    NumericError,
    ParseError,
    ValidationError,
)
from .microvlm import ModelConfig, init_params
from .objectives import LossConfig

__version__ = "0.1.0"
