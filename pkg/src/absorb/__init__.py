"""Bayesian bivariate meta-analysis with a latent selection model for outcome reporting bias."""
__version__ = "0.1.0"
