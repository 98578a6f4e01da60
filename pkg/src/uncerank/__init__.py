"""Uncertainty-aware ranking testbed.

A deterministic, desk-scale implementation of an uncertainty-aware
recommendation stack: an error-predicting critic and an empirical-Bayes
Beta-Bernoulli head on a small cross-feature CTR model, quantile
calibration, segment-aware deboost / UCB ranking policies, and a
synthetic livestream world whose ground-truth click probabilities make
every uncertainty claim checkable.
"""

__version__ = "0.1.0"
