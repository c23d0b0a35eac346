"""Losses, synthetic data, optimizers and the desk-scale training loop."""
