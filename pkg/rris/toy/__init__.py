"""Numerical reference of the fusion model: autodiff, layers, losses and checks."""
