"""Dirichlet-process mixture regularization and imputation for multimodal classification."""

__version__ = "0.1.0"
