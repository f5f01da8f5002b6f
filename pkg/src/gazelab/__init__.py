"""Gaze-preserving face-swap training, evaluation and survey statistics on synthetic faces."""

__version__ = "0.1.0"
