"""Multi-domain GAN super-resolution: degradations, data, models, training and evaluation."""

__version__ = "0.1.0"
