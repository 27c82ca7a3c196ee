"""Blind-data bit-flip attack toolkit.

Synthesizes attack inputs from a trained model's batch-normalization
statistics, then runs gradient-ranked progressive bit search over the model's
quantized weights. No training or test data is needed for the search itself.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward

__all__ = ["Tensor", "backward", "__version__"]
