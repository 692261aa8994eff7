"""Attention-based encoder-decoder captioner with a sequential guiding LSTM."""

__version__ = "0.1.0"
