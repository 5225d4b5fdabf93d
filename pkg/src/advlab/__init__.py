"""advlab: input-denoising + feature-restoring adversarial defense laboratory."""

__version__ = "0.1.0"
