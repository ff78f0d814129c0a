"""Reflection-invariance few-shot semantic segmentation, desk scale.

A from-scratch pipeline: a small tape-autodiff tensor library, multi-view
prototype and prior-mask fusion, learnable prediction fusion, a synthetic
shape benchmark with episodic sampling, SGD training, and mIoU/FB-IoU
evaluation.
"""

from .tensor import EmptyMaskError, ShapeError, Tape, TapeError, Tensor

__all__ = ["Tensor", "Tape", "EmptyMaskError", "ShapeError", "TapeError"]

__version__ = "0.1.0"
