"""Synthetic data, training loop and evaluation."""
