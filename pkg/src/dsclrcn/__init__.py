"""Desk-scale deep spatial contextual LSTM saliency model in numpy."""

__version__ = "0.1.0"
