"""Ensemble Kalman filter laboratory: exact Kalman/Riccati reference, EnKF
backends, non-central Wishart fluctuations and a Monte Carlo harness."""

__version__ = "0.1.0"
