"""Subject-independent activity recognition with adversarial, MMD-regularized features."""

__version__ = "0.1.0"
