"""Detecting epsilon-bad predictions of a trained regressor."""

__version__ = "0.1.0"
