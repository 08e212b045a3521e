"""Spatio-temporal graph convolutional forecasting of shared-bike demand.

The package covers the whole loop: region geometry -> graph, trip logs ->
hourly demand matrices, optional POI text embeddings pooled per region, a
gated spatio-temporal convolutional forecaster (with an optional
embedding-fusion block), training on a hand-rolled reverse-mode tape, and a
CLI tying it together.
"""
from .errors import (
    CacheLoadError,
    InsufficientDataError,
    NumericError,
    OfflineMissError,
    ShapeError,
    StateError,
    TransportError,
    ValidationError,
    WindowError,
)
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "CacheLoadError",
    "InsufficientDataError",
    "NumericError",
    "OfflineMissError",
    "ShapeError",
    "StateError",
    "TransportError",
    "ValidationError",
    "WindowError",
    "__version__",
]
