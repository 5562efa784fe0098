"""Scene parsing with ConvLSTM aggregation of multi-layer backbone features."""

from .tensor import SeededRng, Tape, Tensor, alloc, he_init

__all__ = ["SeededRng", "Tape", "Tensor", "alloc", "he_init"]
__version__ = "0.1.0"
