"""Federated ADMM / Laplace algorithm family."""
