"""Learned adapter explanations (LAX) and the MSI saliency metric."""

__version__ = "0.1.0"
