"""Self-supervised scalogram-signal contrastive learning toolkit."""

__version__ = "0.1.0"

from .engine import Parameter, Tape, Tensor

__all__ = ["Parameter", "Tape", "Tensor", "__version__"]
