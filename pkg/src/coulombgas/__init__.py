"""Coulomb-gas and spherical-integral numerics for rotationally invariant matrix denoising."""

__version__ = "0.1.0"

__all__ = ["ensembles", "hciz", "coulomb", "freeprob", "cumulants", "denoise", "cli", "io"]
