"""Streaming speech recognition with a causal boundary scout and adaptive look-ahead."""

__version__ = "0.1.0"

from .estimators import ScoutNetwork, StreamingRecognizer

__all__ = ["ScoutNetwork", "StreamingRecognizer"]
