"""Numerical laboratory for almost-sure growth of mean-reverting SDEs.

The package simulates linear systems dX = -A X dt + D dW and sublinearly
perturbed variants dX = (F(X) - A X) dt + D dW with exact Gaussian
transition steps, and measures how the running maximum of ||X_t|| grows
against sqrt(log t).  For systems whose A has spectrum in the open right
half plane the normalized maxima settle at sqrt(2 lambda_1), with
lambda_1 the top eigenvalue of the stationary covariance; the modules
here compute that prediction, simulate paths, and test the two against
each other.
"""

from oulab import cli, extremes, matops, model, simulate  # noqa: F401

__version__ = "0.1.0"
