"""Spatio-temporal deep kriging: basis embeddings, quantile networks, ConvLSTM forecasts."""

__version__ = "0.1.0"
