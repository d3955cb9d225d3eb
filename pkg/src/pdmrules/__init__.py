"""Failure prediction for multichannel sensor streams.

Convolutional-autoencoder anomaly detection on sliding windows, a smoothed
failure-probability signal, and an online rule learner that turns confirmed
failures into concise, human-readable threshold rules.
"""

__version__ = "0.1.0"
