"""Uncertainty-calibrated multimodal fusion for Parkinson's disease screening."""

__version__ = "0.1.0"
