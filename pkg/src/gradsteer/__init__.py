"""Softmax gradient reweighting for steering source-separation training."""

__version__ = "0.1.0"
