"""Adversarial robustness benchmark for small learned image codecs."""

__version__ = "0.1.0"
