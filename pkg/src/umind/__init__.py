"""Multitask M/EEG visual decoding: alignment, zero-shot matching, and generator conditioning."""

__version__ = "0.1.0"
