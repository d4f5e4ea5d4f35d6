"""Momentum-adaptive activation dropout, baselines, and a computable PAC-Bayes bound."""

__version__ = "0.1.0"
