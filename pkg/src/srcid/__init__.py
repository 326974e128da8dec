"""Semantic-residual discrete multimodal representation learning at desk scale."""

from . import evalharness, mi, model, numgrad, quantize, synthdata  # noqa: F401

__version__ = "0.1.0"
