"""Recurrent encoder-decoder variants for sequence anomaly detection."""

__version__ = "0.1.0"
