"""Explainable-AI operations: CAM saliency, black-box probing and stability metrics."""

__version__ = "0.1.0"
