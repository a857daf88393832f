"""Numerical core: autodiff, lp geometry, attacks, losses, training and evaluation."""
