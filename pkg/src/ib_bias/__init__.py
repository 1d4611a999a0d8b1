"""Iterative Bootstrap Bias Correction

Simulation-based bias correction of an initial estimator by the iterative
bootstrap fixed point, with logistic and random-intercept logistic
instantiations and a Monte Carlo study harness.
"""

__version__ = "0.1.0"
FORMAT_VERSION = "1"
