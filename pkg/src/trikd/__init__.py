"""Tri-view knowledge-distillation semi-supervised segmentation on a numpy autodiff core."""

__version__ = "0.1.0"
